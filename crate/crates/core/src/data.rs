//! Conversation datasets: the line-delimited record format, a seeded
//! synthetic generator and conversation-level splitting.
//!
//! Record format (whitespace separated):
//!
//! ```text
//! C K d_t d_a d_v
//! conv_id speaker_id label v_t[0..d_t] v_a[0..d_a] v_v[0..d_v]
//! ...
//! ```
//!
//! Utterances of a conversation appear in turn order; conversations are
//! ordered by the first appearance of their id.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    /// Node-layout order: block `m` of a 3N stack holds rows `m·N .. (m+1)·N`.
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Audio => "a",
            Modality::Visual => "v",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalityDims {
    pub text: usize,
    pub audio: usize,
    pub visual: usize,
}

impl ModalityDims {
    pub fn new(text: usize, audio: usize, visual: usize) -> Self {
        Self { text, audio, visual }
    }

    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }

    pub fn total(&self) -> usize {
        self.text + self.audio + self.visual
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker: usize,
    pub label: usize,
    pub text: Vec<f64>,
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
}

impl Utterance {
    pub fn features(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn speakers(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.speaker).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label).collect()
    }

    /// `N × d_m` feature matrix of one modality.
    pub fn modality_matrix(&self, m: Modality) -> Result<Tensor> {
        let d = self.utterances.first().map_or(0, |u| u.features(m).len());
        let data = self
            .utterances
            .iter()
            .flat_map(|u| u.features(m).iter().copied())
            .collect();
        Tensor::matrix(self.len(), d, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub conversations: Vec<Conversation>,
    pub num_classes: usize,
    pub num_speakers: usize,
    pub dims: ModalityDims,
}

impl Dataset {
    pub fn num_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    /// Checks every record against the header values.
    pub fn validate(&self) -> Result<()> {
        if self.conversations.is_empty() {
            return Err(Error::NoConversations);
        }
        for c in &self.conversations {
            if c.is_empty() {
                return Err(Error::Dataset(format!("conversation `{}` has no utterances", c.id)));
            }
            for (i, u) in c.utterances.iter().enumerate() {
                let at = || format!("conversation `{}` utterance {i}", c.id);
                if u.label >= self.num_classes {
                    return Err(Error::Dataset(format!("{}: label {} >= C={}", at(), u.label, self.num_classes)));
                }
                if u.speaker >= self.num_speakers {
                    return Err(Error::Dataset(format!(
                        "{}: speaker {} >= K={}",
                        at(),
                        u.speaker,
                        self.num_speakers
                    )));
                }
                for m in Modality::ALL {
                    let f = u.features(m);
                    if f.len() != self.dims.get(m) {
                        return Err(Error::Dataset(format!(
                            "{}: d_{} is {} but expected {}",
                            at(),
                            m.tag(),
                            f.len(),
                            self.dims.get(m)
                        )));
                    }
                    if f.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Dataset(format!("{}: non-finite {} feature", at(), m.tag())));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        let d = self.dims;
        writeln!(s, "{} {} {} {} {}", self.num_classes, self.num_speakers, d.text, d.audio, d.visual).unwrap();
        for c in &self.conversations {
            if c.id.is_empty() || c.id.chars().any(char::is_whitespace) {
                return Err(Error::Dataset(format!("conversation id `{}` must be non-empty without whitespace", c.id)));
            }
            for u in &c.utterances {
                write!(s, "{} {} {}", c.id, u.speaker, u.label).unwrap();
                for m in Modality::ALL {
                    for v in u.features(m) {
                        write!(s, " {v}").unwrap();
                    }
                }
                s.push('\n');
            }
        }
        Ok(s)
    }

    /// Parses the record format. `source` only labels error messages.
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: source.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, header) = lines.next().ok_or(Error::NoConversations)?;
        let h: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(hline, format!("header: {e}")))?;
        let [c, k, dt, da, dv] = h[..] else {
            return Err(err(hline, format!("header needs `C K d_t d_a d_v`, got {} fields", h.len())));
        };
        if c == 0 || k == 0 {
            return Err(err(hline, "C and K must be at least 1".into()));
        }
        let dims = ModalityDims::new(dt, da, dv);
        let width = 3 + dims.total();

        let mut conversations: Vec<Conversation> = Vec::new();
        for (ln, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != width {
                return Err(err(
                    ln,
                    format!(
                        "expected {} feature values (d_t={dt} d_a={da} d_v={dv}), found {}",
                        dims.total(),
                        fields.len().saturating_sub(3)
                    ),
                ));
            }
            let speaker: usize = fields[1]
                .parse()
                .map_err(|e| err(ln, format!("speaker_id `{}`: {e}", fields[1])))?;
            let label: usize = fields[2]
                .parse()
                .map_err(|e| err(ln, format!("label `{}`: {e}", fields[2])))?;
            if speaker >= k {
                return Err(err(ln, format!("speaker_id {speaker} out of range [0, {k})")));
            }
            if label >= c {
                return Err(err(ln, format!("label {label} out of range [0, {c})")));
            }
            let values: Vec<f64> = fields[3..]
                .iter()
                .map(|t| match t.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    Ok(_) => Err(err(ln, format!("non-finite value `{t}`"))),
                    Err(e) => Err(err(ln, format!("value `{t}`: {e}"))),
                })
                .collect::<Result<_>>()?;
            let utt = Utterance {
                speaker,
                label,
                text: values[..dt].to_vec(),
                audio: values[dt..dt + da].to_vec(),
                visual: values[dt + da..].to_vec(),
            };
            match conversations.iter_mut().find(|cv| cv.id == fields[0]) {
                Some(cv) => cv.utterances.push(utt),
                None => conversations.push(Conversation {
                    id: fields[0].to_string(),
                    utterances: vec![utt],
                }),
            }
        }
        if conversations.is_empty() {
            return Err(Error::NoConversations);
        }
        Ok(Self {
            conversations,
            num_classes: c,
            num_speakers: k,
            dims,
        })
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    Dataset::parse(&text, path)
}

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, d.to_text()?)?;
    Ok(())
}

/// Synthetic generator settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub conversations: usize,
    pub max_len: usize,
    pub classes: usize,
    pub speakers: usize,
    pub dims: ModalityDims,
}

impl SynthSpec {
    pub fn from_config(cfg: &crate::config::Config) -> Self {
        Self {
            conversations: cfg.synth_conversations,
            max_len: cfg.synth_max_len,
            classes: cfg.synth_classes,
            speakers: cfg.synth_speakers,
            dims: ModalityDims::new(cfg.synth_dim_t, cfg.synth_dim_a, cfg.synth_dim_v),
        }
    }
}

/// Per-entry noise relative to the prototype norm.
pub const SYNTH_NOISE_SCALE: f64 = 0.1;
/// Speaker offset norm relative to the mean prototype norm.
pub const SYNTH_SPEAKER_SCALE: f64 = 0.3;

/// Class prototypes `[class][modality] → vector` drawn for `seed`.
pub fn synth_prototypes(spec: &SynthSpec, seed: u64) -> Vec<[Vec<f64>; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_prototypes(spec, &mut rng)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn draw_prototypes(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<[Vec<f64>; 3]> {
    (0..spec.classes)
        .map(|_| Modality::ALL.map(|m| gaussian(rng, spec.dims.get(m))))
        .collect()
}

/// Seeded synthetic conversations: features are a class prototype plus a
/// per-(speaker, modality) offset plus isotropic noise.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.conversations == 0 || spec.max_len == 0 || spec.classes == 0 || spec.speakers == 0 {
        return Err(Error::Dataset("synthetic counts must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes = draw_prototypes(spec, &mut rng);
    let mean_norm: [f64; 3] = Modality::ALL.map(|m| {
        prototypes.iter().map(|p| norm(&p[m.index()])).sum::<f64>() / spec.classes as f64
    });
    let offsets: Vec<[Vec<f64>; 3]> = (0..spec.speakers)
        .map(|_| {
            Modality::ALL.map(|m| {
                let dir = gaussian(&mut rng, spec.dims.get(m));
                let n = norm(&dir).max(f64::MIN_POSITIVE);
                dir.iter()
                    .map(|x| x / n * SYNTH_SPEAKER_SCALE * mean_norm[m.index()])
                    .collect()
            })
        })
        .collect();

    let mut conversations = Vec::with_capacity(spec.conversations);
    for c in 0..spec.conversations {
        let len = rng.random_range(1..=spec.max_len);
        let mut utterances = Vec::with_capacity(len);
        for _ in 0..len {
            let label = rng.random_range(0..spec.classes);
            let speaker = rng.random_range(0..spec.speakers);
            let feats = Modality::ALL.map(|m| {
                let proto = &prototypes[label][m.index()];
                let d = proto.len();
                let sigma = SYNTH_NOISE_SCALE * norm(proto) / (d.max(1) as f64).sqrt();
                let noise = gaussian(&mut rng, d);
                proto
                    .iter()
                    .zip(&offsets[speaker][m.index()])
                    .zip(noise)
                    .map(|((p, o), z)| p + o + sigma * z)
                    .collect::<Vec<f64>>()
            });
            let [text, audio, visual] = feats;
            utterances.push(Utterance {
                speaker,
                label,
                text,
                audio,
                visual,
            });
        }
        conversations.push(Conversation {
            id: format!("synth_{c:04}"),
            utterances,
        });
    }
    Ok(Dataset {
        conversations,
        num_classes: spec.classes,
        num_speakers: spec.speakers,
        dims: spec.dims,
    })
}

/// Splits at conversation granularity; `round(train_frac · n)` conversations
/// go to the training side. Both sides keep their original relative order.
pub fn split_dataset(d: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Dataset(format!("train_frac {train_frac} outside (0, 1)")));
    }
    let n = d.conversations.len();
    let n_train = (train_frac * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Dataset(format!(
            "split of {n} conversations at {train_frac} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| Dataset {
        conversations: idx.iter().map(|&i| d.conversations[i].clone()).collect(),
        num_classes: d.num_classes,
        num_speakers: d.num_speakers,
        dims: d.dims,
    };
    Ok((pick(&train_idx), pick(&test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            conversations: 10,
            max_len: 4,
            classes: 3,
            speakers: 2,
            dims: ModalityDims::new(5, 4, 3),
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_generate(&spec(), 7).unwrap();
        let b = synth_generate(&spec(), 7).unwrap();
        assert_eq!(a.to_text().unwrap(), b.to_text().unwrap());
        let c = synth_generate(&spec(), 8).unwrap();
        assert_ne!(a, c);
        a.validate().unwrap();
    }

    #[test]
    fn prototypes_are_separated() {
        let protos = synth_prototypes(&spec(), 0);
        let mut total = 0.0;
        let mut pairs = 0;
        for i in 0..protos.len() {
            for j in (i + 1)..protos.len() {
                let d2: f64 = (0..3)
                    .map(|m| {
                        protos[i][m]
                            .iter()
                            .zip(&protos[j][m])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .sum();
                total += d2.sqrt();
                pairs += 1;
            }
        }
        assert!(total / pairs as f64 > 0.0);
    }

    #[test]
    fn split_sizes() {
        let d = synth_generate(&spec(), 0).unwrap();
        let (tr, te) = split_dataset(&d, 0.8, 3).unwrap();
        assert_eq!((tr.conversations.len(), te.conversations.len()), (8, 2));
        let (tr2, _) = split_dataset(&d, 0.8, 3).unwrap();
        assert_eq!(tr, tr2);

        let mut two = d.clone();
        two.conversations.truncate(2);
        let (a, b) = split_dataset(&two, 0.5, 0).unwrap();
        assert_eq!((a.conversations.len(), b.conversations.len()), (1, 1));
    }

    #[test]
    fn split_never_empty() {
        let mut d = synth_generate(&spec(), 0).unwrap();
        d.conversations.truncate(2);
        assert!(split_dataset(&d, 0.1, 0).is_err());
        assert!(split_dataset(&d, 1.0, 0).is_err());
    }

    #[test]
    fn parse_rejects_wrong_width_with_line() {
        let text = "2 1 2 1 1\nc0 0 0 1 2 3 4\nc0 0 1 1 2 3 4 5\n";
        let e = Dataset::parse(text, Path::new("x.txt")).unwrap_err();
        match e {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_rejects_out_of_range() {
        let e = Dataset::parse("2 1 1 1 1\nc0 1 0 1 2 3\n", Path::new("x")).unwrap_err();
        assert!(e.to_string().contains("speaker_id 1"), "{e}");
        let e = Dataset::parse("2 1 1 1 1\nc0 0 2 1 2 3\n", Path::new("x")).unwrap_err();
        assert!(e.to_string().contains("label 2"), "{e}");
    }

    #[test]
    fn empty_file_has_no_conversations() {
        assert!(matches!(Dataset::parse("", Path::new("x")), Err(Error::NoConversations)));
        assert!(matches!(
            Dataset::parse("2 1 1 1 1\n", Path::new("x")),
            Err(Error::NoConversations)
        ));
    }
}
