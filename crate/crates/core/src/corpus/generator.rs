//! Seeded generator of synthetic assembly apps with planted structure.
//!
//! A [`World`] fixes everything shared by all apps of a corpus: a universe of
//! platform API slots with names and signatures, per-class background
//! distributions over those slots, short behaviour motifs per class, shared
//! library methods, per-family code bases carrying signature n-grams, and the
//! drift schedule that renames a share of the slots at every epoch step.
//! Apps are then drawn independently from per-app seeds.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AppRecord, Label};
use crate::asmparse::{canonicalize, Instruction};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorProfile {
    /// Platform API slots (at most 2048).
    pub api_count: usize,
    pub zipf_exponent: f64,
    /// Weight of the class-specific component in each background distribution.
    pub class_bias: f64,
    /// Share of slots boosted for each class.
    pub class_specific_share: f64,
    pub classes_per_app: [usize; 2],
    /// Background methods per app (inclusive range).
    pub methods_per_app: [usize; 2],
    /// Platform instructions per background method.
    pub instructions_per_method: [usize; 2],
    /// Expected internal instructions per platform instruction.
    pub internal_rate: f64,
    /// Motif pool size per class.
    pub motif_count: usize,
    pub motif_len: usize,
    pub motifs_per_app: [usize; 2],
    pub library_count: usize,
    pub libraries_per_app: [usize; 2],
    /// Methods in each family's code base; the first `signatures_per_family`
    /// always ship and each carries one signature.
    pub family_methods: usize,
    pub family_method_len: [usize; 2],
    /// Probability of shipping each optional family method.
    pub family_keep: f64,
    /// Per-token probability of a point mutation outside signatures.
    pub family_mutation: f64,
    pub signatures_per_family: usize,
    pub signature_len: usize,
    /// 0 assigns families round-robin; larger values skew sizes Zipf-like.
    pub family_skew: f64,
    /// Share of slots renamed at every epoch step.
    pub drift_rate: f64,
    /// Number of epoch tags.
    pub epochs: u32,
    /// Share of each class tagged epoch 0; `None` spreads apps evenly.
    pub initial_share: Option<f64>,
}

impl Default for GeneratorProfile {
    fn default() -> Self {
        GeneratorProfile {
            api_count: 600,
            zipf_exponent: 1.0,
            class_bias: 0.15,
            class_specific_share: 0.1,
            classes_per_app: [2, 4],
            methods_per_app: [6, 14],
            instructions_per_method: [3, 10],
            internal_rate: 0.5,
            motif_count: 40,
            motif_len: 4,
            motifs_per_app: [2, 4],
            library_count: 40,
            libraries_per_app: [0, 3],
            family_methods: 6,
            family_method_len: [6, 12],
            family_keep: 0.8,
            family_mutation: 0.05,
            signatures_per_family: 3,
            signature_len: 4,
            family_skew: 0.0,
            drift_rate: 0.1,
            epochs: 1,
            initial_share: None,
        }
    }
}

fn check_range(name: &str, r: [usize; 2]) -> Result<()> {
    if r[0] > r[1] {
        return Err(Error::invalid(format!("{name}: empty range {r:?}")));
    }
    Ok(())
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(format!(
            "{name} must lie in [0, 1], got {v}"
        )));
    }
    Ok(())
}

impl GeneratorProfile {
    pub fn validate(&self) -> Result<()> {
        if self.api_count < 16 || self.api_count > MAX_SLOTS {
            return Err(Error::invalid(format!(
                "api_count must lie in [16, {MAX_SLOTS}], got {}",
                self.api_count
            )));
        }
        for (n, r) in [
            ("classes_per_app", self.classes_per_app),
            ("methods_per_app", self.methods_per_app),
            ("instructions_per_method", self.instructions_per_method),
            ("motifs_per_app", self.motifs_per_app),
            ("libraries_per_app", self.libraries_per_app),
            ("family_method_len", self.family_method_len),
        ] {
            check_range(n, r)?;
        }
        if self.classes_per_app[0] == 0 {
            return Err(Error::invalid("apps need at least one class"));
        }
        for (n, v) in [
            ("class_bias", self.class_bias),
            ("class_specific_share", self.class_specific_share),
            ("family_keep", self.family_keep),
            ("family_mutation", self.family_mutation),
            ("drift_rate", self.drift_rate),
        ] {
            check_fraction(n, v)?;
        }
        if self.class_specific_share > 0.5 {
            return Err(Error::invalid(
                "class_specific_share above 0.5 leaves no room for both classes",
            ));
        }
        if self.motif_len == 0 || self.motif_count == 0 || self.signature_len == 0 {
            return Err(Error::invalid(
                "motif and signature lengths must be positive",
            ));
        }
        if self.signatures_per_family == 0 || self.family_methods < self.signatures_per_family {
            return Err(Error::invalid(
                "each family needs at least one signature and a method per signature",
            ));
        }
        if self.libraries_per_app[1] > 0 && self.library_count == 0 {
            return Err(Error::invalid(
                "libraries_per_app needs a non-empty library pool",
            ));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if let Some(s) = self.initial_share {
            check_fraction("initial_share", s)?;
        }
        if !(self.internal_rate >= 0.0)
            || !(self.zipf_exponent >= 0.0)
            || !(self.family_skew >= 0.0)
        {
            return Err(Error::invalid("rates and exponents must be non-negative"));
        }
        Ok(())
    }
}

const MAX_SLOTS: usize = 2048;

const PACKAGES: [&str; 16] = [
    "app",
    "content",
    "net",
    "telephony",
    "location",
    "media",
    "os",
    "provider",
    "database",
    "hardware",
    "bluetooth",
    "webkit",
    "view",
    "accounts",
    "security",
    "nfc",
];
const NOUNS: [&str; 16] = [
    "Device",
    "Account",
    "Network",
    "Location",
    "Message",
    "Package",
    "Window",
    "Sensor",
    "Media",
    "Camera",
    "Contact",
    "Storage",
    "Notification",
    "Alarm",
    "Clipboard",
    "Audio",
];
const KINDS: [&str; 8] = [
    "Manager",
    "Service",
    "Provider",
    "Helper",
    "Controller",
    "Info",
    "Receiver",
    "Session",
];
const VERBS: [&str; 10] = [
    "get", "set", "query", "open", "send", "register", "read", "write", "start", "cancel",
];
const OBJECTS: [&str; 12] = [
    "Id", "State", "Data", "Config", "Handle", "Token", "Status", "Value", "Listener", "Request",
    "Result", "Stream",
];
const COMMON_TYPES: [&str; 10] = [
    "java/lang/String",
    "java/lang/Object",
    "android/content/Context",
    "android/os/Bundle",
    "android/content/Intent",
    "java/io/File",
    "java/util/List",
    "android/net/Uri",
    "java/lang/Integer",
    "android/view/View",
];
const PRIMITIVES: [&str; 3] = ["I", "Z", "J"];
const WORDS: [&str; 16] = [
    "alpha", "nova", "swift", "pixel", "orbit", "lumen", "cedar", "quartz", "ember", "delta",
    "vertex", "harbor", "maple", "zephyr", "onyx", "tundra",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotKind {
    Virtual,
    Static,
    Field,
    New,
}

#[derive(Debug, Clone)]
struct Slot {
    kind: SlotKind,
    class: String,
    member: String,
    args: Vec<&'static str>,
    ret: &'static str,
}

impl Slot {
    fn instruction(&self, version: u32, reg: usize) -> String {
        let suffix = if version == 0 {
            String::new()
        } else {
            format!("V{}", version + 1)
        };
        match self.kind {
            SlotKind::Virtual | SlotKind::Static => {
                let op = if self.kind == SlotKind::Virtual {
                    "invoke-virtual"
                } else {
                    "invoke-static"
                };
                let regs: Vec<String> = (0..self.args.len()
                    + usize::from(self.kind == SlotKind::Virtual))
                    .map(|k| format!("v{}", (reg + k) % 16))
                    .collect();
                format!(
                    "{op} {{{}}}, {}.{}{suffix}({}){}",
                    regs.join(", "),
                    self.class,
                    self.member,
                    self.args.join(", "),
                    self.ret
                )
            }
            SlotKind::Field => format!(
                "sget-object v{reg}, {}.{}{suffix} {}",
                self.class, self.member, self.ret
            ),
            SlotKind::New => format!("new-instance v{reg}, {}{suffix}", self.class),
        }
    }
}

/// Generative state of one epoch.
#[derive(Debug, Clone)]
struct EpochState {
    /// Indexed by `Label as usize` (malware 0, benign 1).
    class_dist: [Vec<f64>; 2],
    samplers: [WeightedIndex<f64>; 2],
    /// Slots boosted in each class's background distribution.
    specific: [Vec<usize>; 2],
    motifs: [Vec<Vec<usize>>; 2],
    /// Per family: methods as slot sequences, with the protected signature span.
    family_code: Vec<Vec<(Vec<usize>, Option<(usize, usize)>)>>,
    /// Name version of every slot.
    versions: Vec<u32>,
}

/// Everything shared by the apps of one generated corpus.
#[derive(Debug, Clone)]
pub struct World {
    pub profile: GeneratorProfile,
    pub n_families: usize,
    slots: Vec<Slot>,
    libraries: Vec<Vec<usize>>,
    signatures: Vec<Vec<Vec<usize>>>,
    /// One state per epoch tag.
    states: Vec<EpochState>,
}

fn class_index(label: Label) -> usize {
    match label {
        Label::Malware => 0,
        Label::Benign => 1,
    }
}

fn pick(rng: &mut impl Rng, r: [usize; 2]) -> usize {
    rng.gen_range(r[0]..=r[1])
}

impl World {
    pub fn new(profile: &GeneratorProfile, n_families: usize, root: u64) -> Result<World> {
        profile.validate()?;
        let p = profile;
        let n = p.api_count;
        let mut rng = seed::child_rng(root, "corpus.world");

        let slots: Vec<Slot> = (0..n)
            .map(|i| {
                let pkg = PACKAGES[i % 16];
                let cls = (i / 16) % 128;
                let class = format!("android/{pkg}/{}{}", NOUNS[cls % 16], KINDS[cls / 16]);
                let kind = match rng.gen_range(0..10) {
                    0..=3 => SlotKind::Virtual,
                    4..=6 => SlotKind::Static,
                    7 | 8 => SlotKind::Field,
                    _ => SlotKind::New,
                };
                let member = match kind {
                    SlotKind::Field => format!("{}_{}", OBJECTS[i % 12].to_uppercase(), i / 12),
                    _ => format!("{}{}", VERBS[(i * 7 + i / 10) % 10], OBJECTS[(i / 3) % 12]),
                };
                let arg = |rng: &mut rand_chacha::ChaCha8Rng| {
                    if rng.gen_bool(0.6) {
                        COMMON_TYPES[rng.gen_range(0..10)]
                    } else {
                        PRIMITIVES[rng.gen_range(0..3)]
                    }
                };
                let args: Vec<&'static str> =
                    (0..rng.gen_range(0..3)).map(|_| arg(&mut rng)).collect();
                let ret = match (kind, rng.gen_range(0..10)) {
                    (SlotKind::Field, _) => COMMON_TYPES[rng.gen_range(0..10)],
                    (_, 0..=3) => "V",
                    (_, 4 | 5) => PRIMITIVES[rng.gen_range(0..3)],
                    _ => COMMON_TYPES[rng.gen_range(0..10)],
                };
                Slot {
                    kind,
                    class,
                    member,
                    args,
                    ret,
                }
            })
            .collect();

        let mut ranks: Vec<usize> = (0..n).collect();
        ranks.shuffle(&mut rng);
        let shared: Vec<f64> = ranks
            .iter()
            .map(|&r| 1.0 / ((r + 1) as f64).powf(p.zipf_exponent))
            .collect();
        let k = ((p.class_specific_share * n as f64).round() as usize).max(1);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let specific: [Vec<usize>; 2] = [0, 1].map(|c| perm[c * k..(c + 1) * k].to_vec());
        let (class_dist, samplers) = class_distributions(p, &shared, &specific);

        let draw = |c: usize, len: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
            (0..len).map(|_| samplers[c].sample(rng)).collect()
        };
        let motifs: [Vec<Vec<usize>>; 2] = [0, 1].map(|c| {
            (0..p.motif_count)
                .map(|_| draw(c, p.motif_len, &mut rng))
                .collect()
        });
        let libraries: Vec<Vec<usize>> = (0..p.library_count)
            .map(|_| {
                let len = pick(&mut rng, p.instructions_per_method).max(1);
                draw(rng.gen_range(0..2), len, &mut rng)
            })
            .collect();

        // signatures must be distinct n-grams across all families
        let mut seen = std::collections::BTreeSet::new();
        let mut signatures = Vec::with_capacity(n_families);
        for _ in 0..n_families {
            let mut fam = Vec::new();
            while fam.len() < p.signatures_per_family {
                let s = draw(0, p.signature_len, &mut rng);
                if seen.insert(s.clone()) {
                    fam.push(s);
                }
            }
            signatures.push(fam);
        }
        let mut family_code = Vec::with_capacity(n_families);
        for sigs in &signatures {
            let mut methods = Vec::new();
            for m in 0..p.family_methods {
                let mut body = draw(0, pick(&mut rng, p.family_method_len), &mut rng);
                let insert: Vec<usize> = if m < p.signatures_per_family {
                    sigs[m].clone()
                } else {
                    let c = &motifs[0];
                    c[rng.gen_range(0..c.len())].clone()
                };
                let at = rng.gen_range(0..=body.len());
                let span = (at, at + insert.len());
                body.splice(at..at, insert);
                methods.push((body, (m < p.signatures_per_family).then_some(span)));
            }
            family_code.push(methods);
        }

        let mut states = vec![EpochState {
            class_dist,
            samplers,
            specific,
            motifs,
            family_code,
            versions: vec![0u32; n],
        }];
        for t in 1..p.epochs {
            let prev = states.last().expect("epoch 0 exists");
            let mut drift_rng = seed::rng(seed::derive_indexed(root, "corpus.drift", u64::from(t)));
            states.push(drift_step(p, &shared, prev, &mut drift_rng));
        }

        Ok(World {
            profile: p.clone(),
            n_families,
            slots,
            libraries,
            signatures,
            states,
        })
    }

    fn state(&self, epoch: u32) -> &EpochState {
        &self.states[(epoch as usize).min(self.states.len() - 1)]
    }

    /// Background slot distribution of one class at epoch 0; sums to 1.
    pub fn class_distribution(&self, label: Label) -> &[f64] {
        self.class_distribution_at(label, 0)
    }

    pub fn class_distribution_at(&self, label: Label, epoch: u32) -> &[f64] {
        &self.state(epoch).class_dist[class_index(label)]
    }

    /// Slots boosted for a class at an epoch.
    pub fn class_specific_slots(&self, label: Label, epoch: u32) -> &[usize] {
        &self.state(epoch).specific[class_index(label)]
    }

    /// Signature slot sequences of each family.
    pub fn family_signatures(&self) -> &[Vec<Vec<usize>>] {
        &self.signatures
    }

    /// Canonical token names a slot emits at an epoch.
    pub fn slot_tokens(&self, slot: usize, epoch: u32) -> Vec<String> {
        let text = self.slots[slot].instruction(self.version(slot, epoch), 0);
        canonicalize(&Instruction::parse_line(&text, 1, 1).expect("generated instructions parse"))
    }

    fn version(&self, slot: usize, epoch: u32) -> u32 {
        self.state(epoch).versions[slot]
    }

    /// Share of slots whose name differs from epoch 0.
    pub fn drifted_share(&self, epoch: u32) -> f64 {
        let v = &self.state(epoch).versions;
        v.iter().filter(|&&v| v > 0).count() as f64 / v.len() as f64
    }

    /// Every platform asset name any epoch of this world can emit, sorted.
    pub fn assets(&self) -> Vec<String> {
        let mut names = std::collections::BTreeSet::new();
        for slot in 0..self.slots.len() {
            let mut vs: Vec<u32> = self.states.iter().map(|st| st.versions[slot]).collect();
            vs.dedup();
            for v in vs {
                let text = self.slots[slot].instruction(v, 0);
                let ins =
                    Instruction::parse_line(&text, 1, 1).expect("generated instructions parse");
                names.extend(canonicalize(&ins));
            }
        }
        names.extend(COMMON_TYPES.iter().map(|s| s.to_string()));
        names.into_iter().collect()
    }

    fn method_bodies(
        &self,
        label: Label,
        family: Option<usize>,
        epoch: u32,
        rng: &mut impl Rng,
    ) -> Vec<Vec<usize>> {
        let p = &self.profile;
        let c = class_index(label);
        let st = self.state(epoch);
        let background = |len: usize, rng: &mut dyn rand::RngCore| -> Vec<usize> {
            let mut r = rng;
            (0..len).map(|_| st.samplers[c].sample(&mut r)).collect()
        };
        let mut bodies = Vec::new();
        for _ in 0..pick(rng, p.methods_per_app) {
            let len = pick(rng, p.instructions_per_method);
            bodies.push(background(len, rng));
        }
        for _ in 0..pick(rng, p.motifs_per_app) {
            let motif = &st.motifs[c][rng.gen_range(0..st.motifs[c].len())];
            let len = pick(rng, p.instructions_per_method);
            let mut body = background(len, rng);
            let at = rng.gen_range(0..=body.len());
            body.splice(at..at, motif.iter().copied());
            bodies.push(body);
        }
        if !self.libraries.is_empty() {
            for _ in 0..pick(rng, p.libraries_per_app) {
                bodies.push(self.libraries[rng.gen_range(0..self.libraries.len())].clone());
            }
        }
        if let Some(f) = family {
            for (m, (body, span)) in st.family_code[f].iter().enumerate() {
                if m >= p.signatures_per_family && !rng.gen_bool(p.family_keep) {
                    continue;
                }
                let mut body = body.clone();
                for (i, tok) in body.iter_mut().enumerate() {
                    let protected = span.is_some_and(|(a, b)| (a..b).contains(&i));
                    if !protected && rng.gen_bool(p.family_mutation) {
                        *tok = st.samplers[0].sample(rng);
                    }
                }
                bodies.push(body);
            }
        }
        bodies.retain(|b| !b.is_empty());
        bodies.shuffle(rng);
        bodies
    }

    /// Assembly text of one app.
    pub fn app_text(
        &self,
        index: usize,
        label: Label,
        family: Option<usize>,
        epoch: u32,
        rng: &mut impl Rng,
    ) -> String {
        use std::fmt::Write as _;
        let p = &self.profile;
        let pkg = format!(
            "com/{}/{}{index}",
            WORDS[rng.gen_range(0..16)],
            WORDS[rng.gen_range(0..16)]
        );
        let bodies = self.method_bodies(label, family, epoch, rng);
        let n_classes = pick(rng, p.classes_per_app).min(bodies.len()).max(1);
        let mut out = String::new();
        let mut per_class: Vec<Vec<&Vec<usize>>> = vec![Vec::new(); n_classes];
        for (i, b) in bodies.iter().enumerate() {
            per_class[i % n_classes].push(b);
        }
        for (ci, methods) in per_class.iter().enumerate() {
            let class = format!("{pkg}/{}{}", NOUNS[rng.gen_range(0..16)], ci);
            let _ = writeln!(out, "class {class}");
            for (mi, body) in methods.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "method {}{}{mi}",
                    VERBS[rng.gen_range(0..10)],
                    OBJECTS[rng.gen_range(0..12)]
                );
                for &slot in body.iter() {
                    while rng.gen_bool((p.internal_rate / (1.0 + p.internal_rate)).min(1.0)) {
                        let _ = writeln!(out, "    {}", internal_instruction(&class, rng));
                    }
                    let reg = rng.gen_range(0..16);
                    let _ = writeln!(
                        out,
                        "    {}",
                        self.slots[slot].instruction(self.version(slot, epoch), reg)
                    );
                }
                out.push_str("    return-void\nend\n");
            }
            out.push_str("end\n");
        }
        out
    }
}

fn class_distributions(
    p: &GeneratorProfile,
    shared: &[f64],
    specific: &[Vec<usize>; 2],
) -> ([Vec<f64>; 2], [WeightedIndex<f64>; 2]) {
    let shared_sum: f64 = shared.iter().sum();
    let dist: [Vec<f64>; 2] = [0, 1].map(|c| {
        let mut d: Vec<f64> = shared
            .iter()
            .map(|w| (1.0 - p.class_bias) * w / shared_sum)
            .collect();
        for &s in &specific[c] {
            d[s] += p.class_bias / specific[c].len() as f64;
        }
        let total: f64 = d.iter().sum();
        d.iter_mut().for_each(|v| *v /= total);
        d
    });
    let samplers = [0, 1].map(|c| WeightedIndex::new(&dist[c]).expect("weights are positive"));
    (dist, samplers)
}

/// One epoch of drift. A `drift_rate` share of the slots gets a new name; the
/// same share of each class's boosted slots and motifs is replaced, and every
/// unprotected family-code token is redrawn with probability `drift_rate`.
fn drift_step(
    p: &GeneratorProfile,
    shared: &[f64],
    prev: &EpochState,
    rng: &mut seed::Rng,
) -> EpochState {
    let n = prev.versions.len();
    let rate = p.drift_rate;
    let share = |len: usize| ((rate * len as f64).round() as usize).min(len);

    let mut versions = prev.versions.clone();
    for s in rand::seq::index::sample(rng, n, share(n)).iter() {
        versions[s] += 1;
    }

    let mut specific = prev.specific.clone();
    for c in 0..2 {
        let k = specific[c].len();
        for pos in rand::seq::index::sample(rng, k, share(k)).iter() {
            let taken: std::collections::BTreeSet<usize> =
                specific.iter().flatten().copied().collect();
            if taken.len() >= n {
                break;
            }
            let fresh = loop {
                let s = rng.gen_range(0..n);
                if !taken.contains(&s) {
                    break s;
                }
            };
            specific[c][pos] = fresh;
        }
    }
    let (class_dist, samplers) = class_distributions(p, shared, &specific);

    let mut motifs = prev.motifs.clone();
    for c in 0..2 {
        let m = motifs[c].len();
        for pos in rand::seq::index::sample(rng, m, share(m)).iter() {
            motifs[c][pos] = (0..p.motif_len).map(|_| samplers[c].sample(rng)).collect();
        }
    }

    let mut family_code = prev.family_code.clone();
    for methods in &mut family_code {
        for (body, span) in methods.iter_mut() {
            for (i, tok) in body.iter_mut().enumerate() {
                let protected = span.is_some_and(|(a, b)| (a..b).contains(&i));
                if !protected && rng.gen_bool(rate) {
                    *tok = samplers[0].sample(rng);
                }
            }
        }
    }

    EpochState {
        class_dist,
        samplers,
        specific,
        motifs,
        family_code,
        versions,
    }
}

fn internal_instruction(class: &str, rng: &mut impl Rng) -> String {
    let r = rng.gen_range(0..16);
    match rng.gen_range(0..6) {
        0 => format!("const/4 v{r}, 0x{:x}", rng.gen_range(0..8)),
        1 => format!("move-result-object v{r}"),
        2 => format!("if-eqz v{r}, :cond_{}", rng.gen_range(0..64)),
        3 => format!("const-string v{r}, \"{}\"", WORDS[rng.gen_range(0..16)]),
        4 => format!(
            "invoke-direct {{v{r}}}, {class}.helper{}()V",
            rng.gen_range(0..4)
        ),
        _ => format!(
            "iget v{r}, v{}, {class}.f{} I",
            rng.gen_range(0..16),
            rng.gen_range(0..8)
        ),
    }
}

fn family_name(f: usize) -> String {
    format!("family-{f:02}")
}

/// Generates `n_mal + n_ben` records.
///
/// Malware families are assigned round-robin (or Zipf-skewed when the
/// profile asks), epoch tags are laid out per class, the combined list is
/// shuffled and ids follow the shuffled order. Returns the records and the
/// world they were drawn from.
pub fn generate_corpus(
    profile: &GeneratorProfile,
    n_mal: usize,
    n_ben: usize,
    n_families: usize,
    root: u64,
) -> Result<(Vec<AppRecord>, World)> {
    if n_families == 0 {
        return Err(Error::invalid("at least one family is required"));
    }
    if n_mal > 0 && n_families > n_mal {
        return Err(Error::invalid(format!(
            "{n_families} families cannot all be populated by {n_mal} malware apps"
        )));
    }
    let world = World::new(profile, n_families, root)?;
    let mut rng = seed::child_rng(root, "corpus.layout");

    let families: Vec<usize> = if profile.family_skew == 0.0 {
        (0..n_mal).map(|j| j % n_families).collect()
    } else {
        let w: Vec<f64> = (0..n_families)
            .map(|f| 1.0 / ((f + 1) as f64).powf(profile.family_skew))
            .collect();
        let dist = WeightedIndex::new(&w).expect("weights are positive");
        (0..n_mal)
            .map(|j| {
                if j < n_families {
                    j
                } else {
                    dist.sample(&mut rng)
                }
            })
            .collect()
    };
    let tags = |n: usize| -> Vec<u32> {
        let e = profile.epochs;
        if e == 1 || n == 0 {
            return vec![0; n];
        }
        let n0 = match profile.initial_share {
            Some(s) => (s * n as f64).round() as usize,
            None => n.div_ceil(e as usize),
        };
        let rest = n - n0;
        (0..n)
            .map(|j| {
                if j < n0 {
                    0
                } else {
                    1 + (((j - n0) * (e as usize - 1)) / rest.max(1)) as u32
                }
            })
            .collect()
    };
    let mal_tags = tags(n_mal);
    let ben_tags = tags(n_ben);
    let mut layout: Vec<(Label, Option<usize>, u32)> = (0..n_mal)
        .map(|j| (Label::Malware, Some(families[j]), mal_tags[j]))
        .chain((0..n_ben).map(|j| (Label::Benign, None, ben_tags[j])))
        .collect();
    layout.shuffle(&mut rng);

    let records = layout
        .par_iter()
        .enumerate()
        .map(|(i, &(label, family, epoch))| {
            let mut r = seed::rng(seed::derive_indexed(root, "corpus.app", i as u64));
            AppRecord {
                id: format!("app{i:05}"),
                label,
                family: family.map(family_name),
                epoch_tag: epoch,
                source_text: world.app_text(i, label, family, epoch, &mut r),
            }
        })
        .collect();
    Ok((records, world))
}
