use dexprint_core::asmparse::{
    canonicalize, parse, platform_assets, tokenize, Instruction, InstructionKind, Vocabulary,
};
use dexprint_core::Error;
use proptest::prelude::*;

const MALWARE_SNIPPET: &str = r#"
class com/example/Payload
method collect
    // object creation
    new-instance v10, java/util/HashMap
    invoke-direct {v10}, java/util/HashMap
    if-eqz v9, 003e
    invoke-virtual {v4}, Android/telephony/TelephonyManager.getDeviceId()java/lang/String
    move-result-object v11
    invoke-virtual {v4}, Android/telephony/TelephonyManager.getSimSerialNumber()java/lang/String
    move-result-object v13
    new-instance v20, java/io/FileReader
    const-string v21, "/proc/cpuinfo"
    invoke-direct/range {v20, v21}, java/io/FileReader.init(java/lang/String)
    iget-object v0, v0, Android/content/pm/ApplicationInfo.metaData Android/os/Bundle
    move-object/from16 v19, v0
end
end
"#;

fn canon_line(line: &str) -> Vec<String> {
    canonicalize(&Instruction::parse_line(line, 1, 1).unwrap())
}

#[test]
fn empty_class_body_has_no_methods() {
    let p = parse("class a/B\nend\n").unwrap();
    assert_eq!(p.classes.len(), 1);
    assert!(p.classes[0].methods.is_empty());
}

#[test]
fn snippet_parses_into_one_method_in_order() {
    let p = parse(MALWARE_SNIPPET).unwrap();
    assert_eq!(p.classes.len(), 1);
    let m = &p.classes[0].methods[0];
    assert_eq!(p.classes[0].methods.len(), 1);
    assert_eq!(m.instructions.len(), 12);
    assert!(matches!(
        m.instructions[0].kind,
        InstructionKind::NewInstance { .. }
    ));
    assert!(matches!(
        m.instructions[3].kind,
        InstructionKind::Invoke { .. }
    ));
    assert!(matches!(
        m.instructions[10].kind,
        InstructionKind::FieldAccess { .. }
    ));
    assert_eq!(m.instructions[0].line, 5);
    assert_eq!(m.instructions[0].column, 5);
    match &m.instructions[3].kind {
        InstructionKind::Invoke {
            call, registers, ..
        } => {
            assert_eq!(call, "Android/telephony/TelephonyManager.getDeviceId");
            assert_eq!(registers, "v4");
        }
        _ => unreachable!(),
    }
}

#[test]
fn unknown_opcode_is_other() {
    let p = parse("class a\nmethod m\nfrobnicate v1, v2\nend\nend").unwrap();
    assert_eq!(
        p.classes[0].methods[0].instructions[0].kind,
        InstructionKind::Other
    );
}

#[test]
fn syntax_errors_carry_line_numbers() {
    let bad_invoke = "class a\nmethod m\n  invoke-virtual v1 broken\nend\nend\n";
    match parse(bad_invoke) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
    match parse("class a\nmethod m\nnop\n") {
        Err(Error::Parse { line, message }) => {
            assert_eq!(line, 2);
            assert!(message.contains("unterminated method"));
        }
        other => panic!("expected parse error, got {other:?}"),
    }
    assert!(matches!(parse("end\n"), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(
        parse("method m\nend\n"),
        Err(Error::Parse { line: 1, .. })
    ));
    assert!(matches!(
        parse("class a\nclass b\nend\nend\n"),
        Err(Error::Parse { line: 2, .. })
    ));
    assert!(matches!(
        parse("class a\nmethod m\nnew-instance v0\nend\nend\n"),
        Err(Error::Parse { line: 3, .. })
    ));
    assert!(matches!(
        parse("class a\nmethod m\niget v0\nend\nend\n"),
        Err(Error::Parse { line: 3, .. })
    ));
}

#[test]
fn canonical_forms_of_the_three_instruction_types() {
    assert_eq!(
        canon_line("invoke-virtual {v19}, StringBuilder.append(java/lang/String)StringBuilder"),
        vec!["StringBuilder.append", "java/lang/String", "StringBuilder"]
    );
    assert_eq!(
        canon_line("new-instance v10, java/util/HashMap"),
        vec!["java/util/HashMap"]
    );
    assert_eq!(
        canon_line("iget-object v0, v0, ApplicationInfo.metaData Android/os/Bundle"),
        vec!["ApplicationInfo.metaData", "Android/os/Bundle"]
    );
    assert!(canon_line("move-result-object v11").is_empty());
    assert!(canon_line("const-string v21, \"/proc/cpuinfo\"").is_empty());
}

#[test]
fn constructors_are_object_manipulation() {
    assert_eq!(
        canon_line("invoke-direct {v10}, java/util/HashMap"),
        vec!["java/util/HashMap"]
    );
    assert_eq!(
        canon_line("invoke-direct {v1, v2}, java/io/File.<init>(java/lang/String)V"),
        vec!["java/io/File"]
    );
    // a non-constructor direct call is a method invocation
    assert_eq!(
        canon_line("invoke-direct {v1}, java/io/File.check()Z"),
        vec!["java/io/File.check"]
    );
    // the same target through invoke-virtual is not a constructor
    assert_eq!(
        canon_line("invoke-virtual {v1}, java/io/File.<init>()V"),
        vec!["java/io/File.<init>"]
    );
}

#[test]
fn snippet_flattens_to_expected_sequence() {
    let p = parse(MALWARE_SNIPPET).unwrap();
    let flat: Vec<String> = p.classes[0].methods[0]
        .instructions
        .iter()
        .flat_map(canonicalize)
        .collect();
    assert_eq!(
        flat,
        vec![
            "java/util/HashMap",
            "java/util/HashMap",
            "Android/telephony/TelephonyManager.getDeviceId",
            "java/lang/String",
            "Android/telephony/TelephonyManager.getSimSerialNumber",
            "java/lang/String",
            "java/io/FileReader",
            "java/io/FileReader.init",
            "java/lang/String",
            "Android/content/pm/ApplicationInfo.metaData",
            "Android/os/Bundle",
        ]
    );
}

#[test]
fn device_id_token_lands_at_its_invocation() {
    // 437 fillers sort before the target, which therefore gets id 2 + 437 = 439
    let mut names: Vec<String> = (0..437).map(|i| format!("AAA/Filler{i:03}")).collect();
    names.push("Android/telephony/TelephonyManager.getDeviceId".into());
    names.push("java/lang/String".into());
    names.push("java/util/HashMap".into());
    let vocab = Vocabulary::from_names(names);
    assert_eq!(
        vocab.get("Android/telephony/TelephonyManager.getDeviceId"),
        Some(439)
    );
    let string_id = vocab.get("java/lang/String").unwrap();
    let map_id = vocab.get("java/util/HashMap").unwrap();

    let app = tokenize(&parse(MALWARE_SNIPPET).unwrap(), &vocab);
    assert_eq!(app.sequences.len(), 1);
    assert_eq!(
        app.sequences[0].tokens,
        vec![map_id, map_id, 439, string_id, string_id, string_id]
    );
}

#[test]
fn out_of_vocabulary_methods_are_omitted_and_duplicates_kept() {
    let text = "class a/A\nmethod m\ninvoke-static {}, x/Y.z()V\nend\nmethod n\nnew-instance v0, p/Q\nend\nend\n\
                class a/B\nmethod n\nnew-instance v0, p/Q\nend\nend\n";
    let vocab = Vocabulary::from_names(["p/Q"]);
    let app = tokenize(&parse(text).unwrap(), &vocab);
    assert_eq!(app.sequences.len(), 2);
    assert!(app.sequences.iter().all(|s| s.tokens == vec![2]));
}

#[test]
fn vocabulary_ids_follow_name_order_and_round_trip() {
    let vocab = Vocabulary::from_names(["zeta/Z", "alpha/A", "mid/M"]);
    assert_eq!(vocab.get("alpha/A"), Some(2));
    assert_eq!(vocab.get("mid/M"), Some(3));
    assert_eq!(vocab.get("zeta/Z"), Some(4));
    assert_eq!(vocab.table_size(), 5);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.json");
    vocab.save(&path).unwrap();
    assert_eq!(Vocabulary::load(&path).unwrap(), vocab);
}

#[test]
fn vocabulary_rejects_bad_files() {
    assert!(matches!(
        Vocabulary::from_json(r#"{"a/A": 2, "a/A": 3}"#),
        Err(Error::Vocabulary(_))
    ));
    assert!(matches!(
        Vocabulary::from_json(r#"{"a/A": 2, "b/B": 4}"#),
        Err(Error::Vocabulary(_))
    ));
    assert!(matches!(
        Vocabulary::from_json(r#"{"a/A": 1}"#),
        Err(Error::Vocabulary(_))
    ));
    assert!(matches!(
        Vocabulary::from_json(r#"{"a/A": 2, "b/B": 2}"#),
        Err(Error::Vocabulary(_))
    ));
    assert!(matches!(
        Vocabulary::from_json("[1, 2]"),
        Err(Error::Vocabulary(_))
    ));
    assert!(Vocabulary::from_json(r#"{"b/B": 3, "a/A": 2}"#).is_ok());
}

#[test]
fn corpus_scan_skips_app_local_assets() {
    let text = "class com/app/Main\nmethod run\n\
                invoke-virtual {v0}, com/app/Main.helper()V\n\
                invoke-virtual {v0}, android/app/Activity.finish()V\n\
                new-instance v1, com/app/Main\n\
                sget-object v0, com/app/Main.INSTANCE android/os/Bundle\n\
                end\nend\n";
    let assets: Vec<String> = platform_assets(&parse(text).unwrap()).into_iter().collect();
    assert_eq!(
        assets,
        vec!["android/app/Activity.finish", "android/os/Bundle"]
    );
}

fn asset() -> impl Strategy<Value = String> {
    ("[a-c]{1,2}", "[A-C][a-z]{0,3}").prop_map(|(p, c)| format!("{p}/{c}"))
}

fn instruction() -> impl Strategy<Value = String> {
    prop_oneof![
        (
            asset(),
            "[a-d]{1,3}",
            proptest::collection::vec(asset(), 0..3),
            asset()
        )
            .prop_map(|(c, m, args, r)| format!(
                "invoke-virtual {{v0, v1}}, {c}.{m}({}){r}",
                args.join(",")
            )),
        asset().prop_map(|c| format!("new-instance v3, {c}")),
        (asset(), "[a-z]{1,4}", asset())
            .prop_map(|(c, f, t)| format!("iget-object v0, v1, {c}.{f} {t}")),
        Just("move-result-object v2".to_string()),
        Just("const/4 v0, 0x1".to_string()),
    ]
}

fn program_text() -> impl Strategy<Value = String> {
    proptest::collection::vec(proptest::collection::vec(instruction(), 0..8), 1..5).prop_map(
        |methods| {
            let mut s = String::from("class com/x/Main\n");
            for (i, body) in methods.iter().enumerate() {
                s.push_str(&format!("method m{i}\n"));
                for line in body {
                    s.push_str("  ");
                    s.push_str(line);
                    s.push('\n');
                }
                s.push_str("end\n");
            }
            s.push_str("end\n");
            s
        },
    )
}

proptest! {
    #[test]
    fn canonicalization_is_pure(text in program_text()) {
        let a = parse(&text).unwrap();
        let b = parse(&text).unwrap();
        prop_assert_eq!(&a, &b);
        for ins in a.classes.iter().flat_map(|c| &c.methods).flat_map(|m| &m.instructions) {
            prop_assert_eq!(canonicalize(ins), canonicalize(ins));
        }
    }

    #[test]
    fn token_order_follows_source_order(text in program_text()) {
        let program = parse(&text).unwrap();
        let vocab = Vocabulary::from_names(platform_assets(&program));
        let app = tokenize(&program, &vocab);
        let mut seqs = app.sequences.iter();
        for m in &program.classes[0].methods {
            let expected: Vec<u32> = m.instructions.iter().flat_map(canonicalize)
                .map(|n| vocab.get(&n).unwrap()).collect();
            if expected.is_empty() {
                continue;
            }
            let got = seqs.next().unwrap();
            prop_assert_eq!(&got.tokens, &expected);
            prop_assert!(!got.tokens.contains(&0));
        }
        prop_assert!(seqs.next().is_none());
    }

    #[test]
    fn serialized_text_reparses_to_same_tokens(text in program_text()) {
        let program = parse(&text).unwrap();
        let again = parse(&program.to_text()).unwrap();
        let vocab = Vocabulary::from_names(platform_assets(&program));
        prop_assert_eq!(tokenize(&program, &vocab), tokenize(&again, &vocab));
    }

    #[test]
    fn vocabulary_json_round_trips(names in proptest::collection::btree_set(asset(), 0..30)) {
        let v = Vocabulary::from_names(names);
        prop_assert_eq!(Vocabulary::from_json(&v.to_json()).unwrap(), v);
    }
}
