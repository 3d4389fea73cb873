//! Synthetic copy/reverse tasks over token motif waveforms.
//!
//! Every token owns a fixed motif of `motif_frames` frames of random
//! samples. An example's waveform is its tokens' motifs in order, with
//! low-amplitude noise frames inserted at random positions. The target is
//! the token sequence itself (copy) or reversed (reverse), chosen by the
//! example's task. Generation is a pure function of the spec, the seed and
//! the example index.
//!
//! File layout: a text header (`usam-dataset 1`, one `key = value` line per
//! spec field, `records = n`, `end`), then per record a little-endian `u32`
//! byte length followed by the record body: task, prompt ids, token ids,
//! target ids, noise frame indices (each a `u32` count plus `u32` values)
//! and the waveform as a `u32` count plus `f32` samples.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TaskSpec;
use crate::error::{Result, UsamError};

const MAGIC: &str = "usam-dataset 1";
const MOTIF_SEED: u64 = 0x6d_6f74_6966;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Copy,
    Reverse,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Copy, Task::Reverse];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Task::ALL
            .get(id)
            .copied()
            .ok_or_else(|| UsamError::format(format!("unknown task id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
        }
    }

    /// Prompt token ids, drawn from the top of the symbol range.
    pub fn prompt(self) -> Vec<usize> {
        match self {
            Task::Copy => vec![28, 30],
            Task::Reverse => vec![29, 31],
        }
    }

    pub fn apply(self, tokens: &[usize]) -> Vec<usize> {
        match self {
            Task::Copy => tokens.to_vec(),
            Task::Reverse => tokens.iter().rev().copied().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub task: Task,
    pub prompt: Vec<usize>,
    /// Tokens in the order their motifs appear in the waveform.
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    /// Indices of generator frames that are noise, ascending.
    pub noise_frames: Vec<usize>,
    pub samples: Vec<f64>,
}

impl Example {
    pub fn frames(&self, spec: &TaskSpec) -> usize {
        self.samples.len() / spec.frame_samples
    }
}

/// The fixed waveform of `token`: `motif_frames * frame_samples` samples in
/// `[-1, 1]`, rounded to `f32`.
pub fn motif(spec: &TaskSpec, token: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(MOTIF_SEED);
    rng.set_stream(token as u64);
    (0..spec.motif_frames * spec.frame_samples)
        .map(|_| f64::from(rng.gen_range(-1.0f32..=1.0)))
        .collect()
}

/// Number of noise frames added to `signal` motif frames.
pub fn noise_frame_count(signal: usize, ratio: f64) -> usize {
    (signal as f64 * ratio / (1.0 - ratio)).round() as usize
}

pub fn generate_example(spec: &TaskSpec, seed: u64, index: u64) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let task = Task::ALL[(index % 2) as usize];
    let len = rng.gen_range(spec.min_tokens..=spec.max_tokens);
    let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.vocab)).collect();
    let signal = len * spec.motif_frames;
    let noise = noise_frame_count(signal, spec.noise_ratio);
    let total = signal + noise;
    let mut noise_frames = rand::seq::index::sample(&mut rng, total, noise).into_vec();
    noise_frames.sort_unstable();

    let fs = spec.frame_samples;
    let motifs: Vec<Vec<f64>> = tokens.iter().map(|&t| motif(spec, t)).collect();
    let mut samples = Vec::with_capacity(total * fs);
    let mut next_noise = noise_frames.iter().peekable();
    let mut signal_frame = 0;
    for frame in 0..total {
        if next_noise.peek() == Some(&&frame) {
            next_noise.next();
            let a = spec.noise_amplitude as f32;
            samples.extend((0..fs).map(|_| f64::from(a * rng.gen_range(-1.0f32..=1.0))));
        } else {
            let (tok, part) = (signal_frame / spec.motif_frames, signal_frame % spec.motif_frames);
            samples.extend_from_slice(&motifs[tok][part * fs..(part + 1) * fs]);
            signal_frame += 1;
        }
    }
    Example {
        task,
        prompt: task.prompt(),
        targets: task.apply(&tokens),
        tokens,
        noise_frames,
        samples,
    }
}

pub fn generate(spec: &TaskSpec, seed: u64, n: usize) -> Vec<Example> {
    (0..n as u64).map(|i| generate_example(spec, seed, i)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub examples: Vec<Example>,
}

fn header_entries(spec: &TaskSpec) -> Vec<(&'static str, String)> {
    vec![
        ("vocab", spec.vocab.to_string()),
        ("motif_frames", spec.motif_frames.to_string()),
        ("frame_samples", spec.frame_samples.to_string()),
        ("noise_ratio", spec.noise_ratio.to_string()),
        ("noise_amplitude", spec.noise_amplitude.to_string()),
        ("min_tokens", spec.min_tokens.to_string()),
        ("max_tokens", spec.max_tokens.to_string()),
        ("data_seed", spec.data_seed.to_string()),
    ]
}

fn put_ids(buf: &mut Vec<u8>, ids: &[usize]) {
    buf.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for &i in ids {
        buf.extend_from_slice(&(i as u32).to_le_bytes());
    }
}

impl Dataset {
    pub fn generate(spec: &TaskSpec, n: usize) -> Self {
        Self {
            spec: *spec,
            examples: generate(spec, spec.data_seed, n),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\n");
        for (k, v) in header_entries(&self.spec) {
            let _ = writeln!(header, "{k} = {v}");
        }
        let _ = writeln!(header, "records = {}\nend", self.examples.len());
        let mut out = header.into_bytes();
        for e in &self.examples {
            let mut rec = Vec::new();
            rec.extend_from_slice(&(e.task.id() as u32).to_le_bytes());
            put_ids(&mut rec, &e.prompt);
            put_ids(&mut rec, &e.tokens);
            put_ids(&mut rec, &e.targets);
            put_ids(&mut rec, &e.noise_frames);
            rec.extend_from_slice(&(e.samples.len() as u32).to_le_bytes());
            for &s in &e.samples {
                rec.extend_from_slice(&(s as f32).to_le_bytes());
            }
            out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
            out.extend_from_slice(&rec);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| UsamError::format("unterminated dataset header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| UsamError::format("header is not UTF-8"))
        };
        if line()? != MAGIC {
            return Err(UsamError::format("not a dataset file (bad magic line)"));
        }
        let mut spec = TaskSpec::default();
        let mut records = None;
        loop {
            let l = line()?;
            if l == "end" {
                break;
            }
            let (k, v) = l
                .split_once(" = ")
                .ok_or_else(|| UsamError::format(format!("bad header line `{l}`")))?;
            let bad = || UsamError::format(format!("bad header value `{l}`"));
            match k {
                "vocab" => spec.vocab = v.parse().map_err(|_| bad())?,
                "motif_frames" => spec.motif_frames = v.parse().map_err(|_| bad())?,
                "frame_samples" => spec.frame_samples = v.parse().map_err(|_| bad())?,
                "noise_ratio" => spec.noise_ratio = v.parse().map_err(|_| bad())?,
                "noise_amplitude" => spec.noise_amplitude = v.parse().map_err(|_| bad())?,
                "min_tokens" => spec.min_tokens = v.parse().map_err(|_| bad())?,
                "max_tokens" => spec.max_tokens = v.parse().map_err(|_| bad())?,
                "data_seed" => spec.data_seed = v.parse().map_err(|_| bad())?,
                "records" => records = Some(v.parse::<usize>().map_err(|_| bad())?),
                _ => return Err(UsamError::format(format!("unknown header key `{k}`"))),
            }
        }
        let records = records.ok_or_else(|| UsamError::format("header lacks a record count"))?;
        let mut reader = Reader { bytes, pos };
        let mut examples = Vec::with_capacity(records);
        for _ in 0..records {
            let len = reader.u32()? as usize;
            let end = reader.pos + len;
            if end > bytes.len() {
                return Err(UsamError::format("truncated record"));
            }
            let task = Task::from_id(reader.u32()? as usize)?;
            let prompt = reader.ids()?;
            let tokens = reader.ids()?;
            let targets = reader.ids()?;
            let noise_frames = reader.ids()?;
            let n = reader.u32()? as usize;
            let mut samples = Vec::with_capacity(n);
            for _ in 0..n {
                samples.push(f64::from(f32::from_le_bytes(reader.take4()?)));
            }
            if reader.pos != end {
                return Err(UsamError::format("record length does not match its contents"));
            }
            examples.push(Example {
                task,
                prompt,
                tokens,
                targets,
                noise_frames,
                samples,
            });
        }
        if reader.pos != bytes.len() {
            return Err(UsamError::format("trailing bytes after the last record"));
        }
        Ok(Self { spec, examples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// One line per record, for inspection.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        for (i, e) in self.examples.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i}\ttask={}\tprompt={}\ttokens={}\ttargets={}\tnoise={}\tsamples={}",
                e.task.name(),
                join(&e.prompt),
                join(&e.tokens),
                join(&e.targets),
                join(&e.noise_frames),
                e.samples.len()
            );
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take4(&mut self) -> Result<[u8; 4]> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| UsamError::format("truncated dataset"))?;
        self.pos += 4;
        Ok([b[0], b[1], b[2], b[3]])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take4()?))
    }

    fn ids(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| Ok(self.u32()? as usize)).collect()
    }
}
