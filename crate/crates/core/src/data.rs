//! Deterministic synthetic two-domain corpus.
//!
//! Tokens follow a fixed Markov grammar without self-transitions. Every
//! token owns a smooth prototype pattern over the feature channels; an
//! utterance concatenates the prototypes of its tokens, each stretched over
//! its segment, then adds noise and a per-channel affine warp. The grammar
//! and prototypes come from `world_seed` and are shared by both domains, so
//! domains differ only in length, tempo, warp and noise.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature file magic.
pub const FEATURE_MAGIC: &[u8; 4] = b"HPF1";
const MAX_RETRIES: usize = 200;
const HARMONICS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
    Dev,
    Test,
}

macro_rules! text_enum {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)+
                    _ => Err(Error::Format(format!("unknown {} `{s}`", stringify!($t).to_lowercase()))),
                }
            }
        }
    };
}

text_enum!(Domain, Source => "source", Target => "target");
text_enum!(Split, Train => "train", Heldout => "heldout", Dev => "dev", Test => "test");

/// Generation parameters for one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Mean utterance length in frames.
    pub mean_frames: f64,
    /// Standard deviation of the log length.
    pub length_dispersion: f64,
    /// Mean frames per token at tempo 1.
    pub frames_per_token: f64,
    /// Segment stretch factor; values above 1 mean slower speech.
    pub tempo: f64,
    /// Magnitude of the per-channel additive shift.
    pub channel_shift: f64,
    /// Magnitude of the per-channel scale deviation from 1 (must be < 1).
    pub channel_scale: f64,
    /// Standard deviation of additive frame noise.
    pub noise: f64,
    /// Seed of this domain's warp and sampling streams.
    pub seed: u64,
}

impl DomainSpec {
    /// Long, clean utterances.
    pub fn source() -> Self {
        Self {
            mean_frames: 120.0,
            length_dispersion: 0.25,
            frames_per_token: 16.0,
            tempo: 1.0,
            channel_shift: 0.0,
            channel_scale: 0.0,
            noise: 0.1,
            seed: 1,
        }
    }

    /// Short, fast, channel-shifted utterances.
    pub fn target() -> Self {
        Self {
            mean_frames: 12.0,
            length_dispersion: 0.25,
            frames_per_token: 16.0,
            tempo: 0.6,
            channel_shift: 0.6,
            channel_scale: 0.4,
            noise: 1.0,
            seed: 2,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let bad = |name: &str, msg: &str| Err(Error::config(format!("{field}.{name}"), msg));
        if !(self.mean_frames >= 8.0) {
            return bad("mean_frames", "must be at least 8");
        }
        if !(self.length_dispersion >= 0.0) {
            return bad("length_dispersion", "must be nonnegative");
        }
        if !(self.frames_per_token > 0.0) {
            return bad("frames_per_token", "must be positive");
        }
        if !(self.tempo > 0.0) {
            return bad("tempo", "must be positive");
        }
        if !(self.channel_scale >= 0.0 && self.channel_scale < 1.0) {
            return bad("channel_scale", "must lie in [0, 1) so the warp stays invertible");
        }
        if !(self.channel_shift.is_finite() && self.noise >= 0.0) {
            return bad("noise", "shift must be finite and noise nonnegative");
        }
        Ok(())
    }
}

/// Utterance counts; `heldout` is carved out of `train`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub heldout_fraction: f64,
}

impl SplitCounts {
    pub fn new(train: usize, dev: usize, test: usize) -> Self {
        Self {
            train,
            dev,
            test,
            heldout_fraction: 0.1,
        }
    }

    fn heldout(&self) -> usize {
        ((self.train as f64 * self.heldout_fraction).round() as usize).clamp(1, self.train - 1)
    }
}

/// Everything needed to regenerate a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    /// Vocabulary size including blank (0) and the sentinel (last id).
    pub vocab: usize,
    pub feat_dim: usize,
    /// Seed of the grammar and token prototypes shared by all domains.
    pub world_seed: u64,
    pub source: DomainSpec,
    pub source_counts: SplitCounts,
    pub target: DomainSpec,
    pub target_counts: SplitCounts,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab: 10,
            feat_dim: 16,
            world_seed: 7,
            source: DomainSpec::source(),
            source_counts: SplitCounts::new(400, 40, 40),
            target: DomainSpec::target(),
            target_counts: SplitCounts::new(100, 100, 400),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 {
            return Err(Error::config(
                "corpus.vocab",
                "need blank, sentinel and at least two tokens",
            ));
        }
        if self.feat_dim == 0 {
            return Err(Error::config("corpus.feat_dim", "must be positive"));
        }
        self.source.validate("corpus.source")?;
        self.target.validate("corpus.target")?;
        for (name, c) in [
            ("source_counts", &self.source_counts),
            ("target_counts", &self.target_counts),
        ] {
            if c.train < 2 || c.dev == 0 || c.test == 0 {
                return Err(Error::config(
                    format!("corpus.{name}"),
                    "need at least 2 train, 1 dev and 1 test utterance",
                ));
            }
            if !(c.heldout_fraction > 0.0 && c.heldout_fraction < 1.0) {
                return Err(Error::config(
                    format!("corpus.{name}.heldout_fraction"),
                    "must lie in (0, 1)",
                ));
            }
        }
        Ok(())
    }

    pub fn domain(&self, d: Domain) -> (&DomainSpec, &SplitCounts) {
        match d {
            Domain::Source => (&self.source, &self.source_counts),
            Domain::Target => (&self.target, &self.target_counts),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub domain: Domain,
    pub split: Split,
    /// `[frames, feat_dim]`.
    pub features: Tensor,
    pub tokens: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub utterances: Vec<Utterance>,
}

/// Shared grammar and prototypes.
struct World {
    /// Row `a` holds cumulative transition weights from token `a`.
    transitions: Vec<Vec<f64>>,
    /// `[token][channel][harmonic] → (amplitude, frequency, phase)`
    prototypes: Vec<Vec<[(f64, f64, f64); HARMONICS]>>,
    offsets: Vec<Vec<f64>>,
    tokens: usize,
}

impl World {
    fn new(spec: &CorpusSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.world_seed);
        let tokens = spec.vocab - 2;
        let transitions = (0..tokens)
            .map(|a| {
                let mut acc = 0.0;
                (0..tokens)
                    .map(|b| {
                        if a != b {
                            acc += rng.gen_range(0.2..1.0);
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        let prototypes = (0..tokens)
            .map(|_| {
                (0..spec.feat_dim)
                    .map(|_| {
                        std::array::from_fn(|h| {
                            (
                                rng.gen_range(0.5..1.5) / (h + 1) as f64,
                                rng.gen_range(0.5..2.0) * (h + 1) as f64,
                                rng.gen_range(0.0..std::f64::consts::TAU),
                            )
                        })
                    })
                    .collect()
            })
            .collect();
        let offsets = (0..tokens)
            .map(|_| (0..spec.feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        Self {
            transitions,
            prototypes,
            offsets,
            tokens,
        }
    }

    /// Token ids are `1..=tokens`.
    fn sentence(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        let mut cur = rng.gen_range(0..self.tokens);
        out.push(cur + 1);
        for _ in 1..n {
            let row = &self.transitions[cur];
            let u = rng.gen_range(0.0..*row.last().unwrap());
            cur = row.iter().position(|&c| u < c).unwrap_or(self.tokens - 1);
            out.push(cur + 1);
        }
        out
    }

    /// Prototype of token `k` (0-based) at relative position `tau ∈ (0,1)`.
    fn render(&self, k: usize, tau: f64, out: &mut [f64]) {
        let envelope = (std::f64::consts::PI * tau).sin();
        for (c, v) in out.iter_mut().enumerate() {
            let wave: f64 = self.prototypes[k][c]
                .iter()
                .map(|&(a, f, p)| a * (std::f64::consts::TAU * f * tau + p).cos())
                .sum();
            *v = self.offsets[k][c] + envelope * wave;
        }
    }
}

/// Generates every split of both domains.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let world = World::new(spec);
    let mut utterances = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        utterances.extend(generate_domain(spec, &world, domain)?);
    }
    Ok(Corpus {
        spec: spec.clone(),
        utterances,
    })
}

fn generate_domain(spec: &CorpusSpec, world: &World, domain: Domain) -> Result<Vec<Utterance>> {
    let (ds, counts) = spec.domain(domain);
    let mut warp_rng = ChaCha8Rng::seed_from_u64(ds.seed ^ 0x5741_5250);
    let scale: Vec<f64> = (0..spec.feat_dim)
        .map(|_| 1.0 + ds.channel_scale * warp_rng.gen_range(-1.0..1.0))
        .collect();
    let shift: Vec<f64> = (0..spec.feat_dim)
        .map(|_| ds.channel_shift * warp_rng.gen_range(-1.0..1.0))
        .collect();

    let heldout = counts.heldout();
    let plan = [
        (Split::Train, counts.train - heldout),
        (Split::Heldout, heldout),
        (Split::Dev, counts.dev),
        (Split::Test, counts.test),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(ds.seed);
    let mut out = Vec::new();
    for (split, n) in plan {
        for i in 0..n {
            let (features, tokens) = generate_one(spec, ds, world, &scale, &shift, &mut rng)?;
            out.push(Utterance {
                id: format!("{domain}-{split}-{i:05}"),
                domain,
                split,
                features,
                tokens,
            });
        }
    }
    Ok(out)
}

fn generate_one(
    spec: &CorpusSpec,
    ds: &DomainSpec,
    world: &World,
    scale: &[f64],
    shift: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let sigma = ds.length_dispersion;
    for _ in 0..MAX_RETRIES {
        let z: f64 = StandardNormal.sample(rng);
        // log-normal with mean `mean_frames`
        let frames = (ds.mean_frames * (sigma * z - 0.5 * sigma * sigma).exp()).round() as usize;
        let max_tokens = (frames / 4).saturating_sub(1);
        if max_tokens == 0 {
            continue;
        }
        let per_token = ds.frames_per_token * ds.tempo;
        let jitter: f64 = rng.gen_range(0.8..1.2);
        let n = ((frames as f64 / per_token * jitter).round() as usize).clamp(1, max_tokens);
        let tokens = world.sentence(n, rng);

        // segment lengths proportional to random weights, each at least 1
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.7..1.3)).collect();
        let total: f64 = weights.iter().sum();
        let mut bounds = vec![0usize];
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            bounds.push(((acc / total) * frames as f64).round() as usize);
        }
        *bounds.last_mut().unwrap() = frames;
        for i in 1..bounds.len() {
            let lo = bounds[i - 1] + 1;
            let hi = frames - (bounds.len() - 1 - i);
            bounds[i] = bounds[i].clamp(lo, hi);
        }

        let f = spec.feat_dim;
        let noise = Normal::new(0.0, ds.noise.max(0.0)).expect("nonnegative std");
        let mut data = vec![0.0; frames * f];
        for (s, &tok) in tokens.iter().enumerate() {
            let (a, b) = (bounds[s], bounds[s + 1]);
            for t in a..b {
                let tau = (t - a) as f64 / (b - a) as f64 + 0.5 / (b - a) as f64;
                world.render(tok - 1, tau, &mut data[t * f..(t + 1) * f]);
            }
        }
        for (i, v) in data.iter_mut().enumerate() {
            let c = i % f;
            let e = if ds.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            *v = scale[c] * (*v + e) + shift[c];
        }
        return Ok((Tensor::new(vec![frames, f], data)?, tokens));
    }
    Err(Error::Generation(format!(
        "could not draw a feasible utterance for mean length {} in {MAX_RETRIES} attempts",
        ds.mean_frames
    )))
}

impl Corpus {
    pub fn select(&self, domain: Domain, split: Split) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.domain == domain && u.split == split)
            .collect()
    }

    pub fn mean_frames(&self, domain: Domain) -> f64 {
        let lens: Vec<usize> = self
            .utterances
            .iter()
            .filter(|u| u.domain == domain)
            .map(Utterance::frames)
            .collect();
        lens.iter().sum::<usize>() as f64 / lens.len().max(1) as f64
    }

    /// Writes `manifest.tsv`, `corpus.json` and `feats/<id>.f64` under
    /// `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let feats = dir.join("feats");
        fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
        let spec_path = dir.join("corpus.json");
        let spec = serde_json::to_string_pretty(&self.spec).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&spec_path, spec).map_err(|e| Error::io(&spec_path, e))?;

        let manifest = dir.join("manifest.tsv");
        let mut m = String::from("id\tdomain\tsplit\tframes\ttokens\n");
        for u in &self.utterances {
            let toks: Vec<String> = u.tokens.iter().map(usize::to_string).collect();
            m.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                u.id,
                u.domain,
                u.split,
                u.frames(),
                toks.join(" ")
            ));
            write_features(&feats.join(format!("{}.f64", u.id)), &u.features)?;
        }
        fs::write(&manifest, m).map_err(|e| Error::io(&manifest, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec_path = dir.join("corpus.json");
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec: CorpusSpec =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", spec_path.display())))?;
        let manifest = dir.join("manifest.tsv");
        let file = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut utterances = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&manifest, e))?;
            if lineno == 0 || line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("{}:{}: {what}", manifest.display(), lineno + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad("expected 5 tab-separated columns"));
            }
            let frames: usize = cols[3].parse().map_err(|_| bad("bad frame count"))?;
            let tokens = cols[4]
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("bad token id"))?;
            if tokens.iter().any(|&t| t == 0 || t >= spec.vocab - 1) {
                return Err(bad("token id outside 1..vocab-1"));
            }
            let features = read_features(&dir.join("feats").join(format!("{}.f64", cols[0])))?;
            if features.rows() != frames || features.cols() != spec.feat_dim {
                return Err(bad("feature shape disagrees with manifest"));
            }
            utterances.push(Utterance {
                id: cols[0].to_string(),
                domain: cols[1].parse()?,
                split: cols[2].parse()?,
                features,
                tokens,
            });
        }
        Ok(Self { spec, utterances })
    }
}

/// `HPF1`, `u32` rows, `u32` cols, then `rows·cols` little-endian `f64`.
pub fn write_features(path: &Path, t: &Tensor) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(12 + 8 * t.numel());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("missing HPF1 header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 8 * rows * cols {
        return Err(bad("payload length disagrees with header"));
    }
    let data = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![rows, cols], data).map_err(|_| bad("empty feature matrix"))
}

/// Splits utterances at the lower median length; utterances of exactly the
/// median length go to the shorter half.
pub fn median_split<'a>(utts: &[&'a Utterance]) -> (Vec<&'a Utterance>, Vec<&'a Utterance>) {
    if utts.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let mut lens: Vec<usize> = utts.iter().map(|u| u.frames()).collect();
    lens.sort_unstable();
    let median = lens[(lens.len() - 1) / 2];
    utts.iter().partition(|u| u.frames() <= median)
}

/// Counts of `(domain, split)` pairs, for summaries.
pub fn split_sizes(corpus: &Corpus) -> BTreeMap<(Domain, Split), usize> {
    let mut m = BTreeMap::new();
    for u in &corpus.utterances {
        *m.entry((u.domain, u.split)).or_insert(0) += 1;
    }
    m
}

/// Deterministic shuffle of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
