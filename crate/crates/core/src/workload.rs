//! Request traces: interception classes, synthetic generation, and the JSONL
//! trace format.
//!
//! A request alternates decode segments with interceptions. The context a
//! request holds when its `j`-th interception fires is
//! `prompt + sum_{k<j}(decode_k + return_k) + decode_j`.
//!
//! Randomness: generation uses ChaCha8 seeded with `seed`. Stream 1 drives
//! inter-arrival gaps and stream 2 drives request bodies, so rescaling the
//! arrival process never perturbs the bodies.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::RequestId;

pub const TRACE_FORMAT: &str = "intercept-trace";
pub const TRACE_VERSION: u32 = 1;

const ARRIVAL_STREAM: u64 = 1;
const BODY_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassName {
    Math,
    QA,
    VE,
    Chatbot,
    Image,
    TTS,
}

impl ClassName {
    pub const ALL: [ClassName; 6] = [
        ClassName::Math,
        ClassName::QA,
        ClassName::VE,
        ClassName::Chatbot,
        ClassName::Image,
        ClassName::TTS,
    ];

    /// Human-in-the-loop interceptions: a person reads output and replies.
    pub fn is_interactive(self) -> bool {
        matches!(self, ClassName::Chatbot | ClassName::Image | ClassName::TTS)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassName::Math => "Math",
            ClassName::QA => "QA",
            ClassName::VE => "VE",
            ClassName::Chatbot => "Chatbot",
            ClassName::Image => "Image",
            ClassName::TTS => "TTS",
        }
    }
}

impl fmt::Display for ClassName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ClassName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClassName::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown interception class `{s}`")))
    }
}

/// Statistics of one interception type: (mean, variance) pairs for the
/// interception duration, interceptions per request, and context length at
/// interception time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterceptionClass {
    pub name: ClassName,
    pub duration_mean: f64,
    pub duration_var: f64,
    pub count_mean: f64,
    pub count_var: f64,
    pub context_mean: f64,
    pub context_var: f64,
    pub return_tokens_mean: f64,
}

impl InterceptionClass {
    /// Measured defaults for each class.
    pub fn builtin(name: ClassName) -> Self {
        let (duration, count, context, ret) = match name {
            ClassName::Math => ((9e-5, 6e-5), (3.75, 1.3), (1422.0, 738.0), 20.0),
            ClassName::QA => ((0.69, 0.17), (2.52, 1.73), (1846.0, 428.0), 54.0),
            ClassName::VE => ((0.09, 0.014), (28.18, 15.2), (2185.0, 115.0), 11.0),
            ClassName::Chatbot => ((28.6, 15.6), (4.45, 1.96), (753.0, 703.0), 65.0),
            ClassName::Image => ((20.03, 7.8), (6.91, 3.93), (1247.0, 792.0), 36.0),
            ClassName::TTS => ((17.24, 7.6), (6.91, 3.93), (1251.0, 792.0), 36.0),
        };
        InterceptionClass {
            name,
            duration_mean: duration.0,
            duration_var: duration.1,
            count_mean: count.0,
            count_var: count.1,
            context_mean: context.0,
            context_var: context.1,
            return_tokens_mean: ret,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let means = [
            self.duration_mean,
            self.count_mean,
            self.context_mean,
            self.return_tokens_mean + 1.0,
        ];
        let vars = [self.duration_var, self.count_var, self.context_var];
        if means.iter().any(|m| !(m.is_finite() && *m > 0.0))
            || vars.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || self.return_tokens_mean < 0.0
        {
            return Err(Error::InvalidConfig(format!(
                "class {} needs positive means and non-negative variances",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interception {
    pub kind: ClassName,
    pub duration: f64,
    #[serde(rename = "ret")]
    pub return_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    #[serde(rename = "decode")]
    pub decode_tokens: u32,
    #[serde(rename = "int", default, skip_serializing_if = "Option::is_none")]
    pub interception: Option<Interception>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub arrival: f64,
    pub prompt_tokens: u32,
    pub segments: Vec<Segment>,
}

impl Request {
    pub fn output_tokens(&self) -> u64 {
        self.segments.iter().map(|s| u64::from(s.decode_tokens)).sum()
    }

    pub fn interceptions(&self) -> impl Iterator<Item = &Interception> {
        self.segments.iter().filter_map(|s| s.interception.as_ref())
    }

    pub fn total_interception_time(&self) -> f64 {
        self.interceptions().map(|i| i.duration).sum()
    }

    /// Label used in reports: the class of the first interception, or `plain`.
    pub fn class_label(&self) -> &'static str {
        self.interceptions()
            .next()
            .map_or("plain", |i| i.kind.as_str())
    }

    /// Context length at each interception, in firing order.
    pub fn interception_contexts(&self) -> Vec<u64> {
        let mut context = u64::from(self.prompt_tokens);
        let mut out = Vec::new();
        for seg in &self.segments {
            context += u64::from(seg.decode_tokens);
            if let Some(int) = &seg.interception {
                out.push(context);
                context += u64::from(int.return_tokens);
            }
        }
        out
    }

    /// Largest number of KV tokens the request ever holds.
    pub fn peak_context(&self) -> u64 {
        u64::from(self.prompt_tokens)
            + self
                .segments
                .iter()
                .map(|s| {
                    u64::from(s.decode_tokens)
                        + s.interception.as_ref().map_or(0, |i| u64::from(i.return_tokens))
                })
                .sum::<u64>()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Validation(format!("request {}: {msg}", self.id)));
        if !(self.arrival.is_finite() && self.arrival >= 0.0) {
            return fail("arrival must be a finite non-negative time");
        }
        let Some((last, body)) = self.segments.split_last() else {
            return fail("segments must not be empty");
        };
        if last.interception.is_some() {
            return fail("final segment must not carry an interception");
        }
        if body.iter().any(|s| s.interception.is_none()) {
            return fail("every segment except the last must carry an interception");
        }
        if self.segments.iter().any(|s| s.decode_tokens == 0) {
            return fail("decode_tokens must be at least 1");
        }
        if self
            .interceptions()
            .any(|i| !(i.duration.is_finite() && i.duration >= 0.0))
        {
            return fail("interception durations must be finite and non-negative");
        }
        Ok(())
    }
}

/// Mean/variance pair sampled through a moment-matched lognormal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub var: f64,
}

impl Moments {
    pub const fn new(mean: f64, var: f64) -> Self {
        Moments { mean, var }
    }

    fn sampler(self) -> Result<MomentLogNormal> {
        MomentLogNormal::new(self.mean, self.var)
    }
}

/// Lognormal whose mean and variance match the given moments.
/// Zero variance degenerates to the constant `mean`.
#[derive(Debug, Clone, Copy)]
pub struct MomentLogNormal {
    mean: f64,
    dist: Option<LogNormal<f64>>,
}

impl MomentLogNormal {
    pub fn new(mean: f64, var: f64) -> Result<Self> {
        if !(mean.is_finite() && mean > 0.0 && var.is_finite() && var >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lognormal needs mean > 0 and variance >= 0, got ({mean}, {var})"
            )));
        }
        if var == 0.0 {
            return Ok(MomentLogNormal { mean, dist: None });
        }
        let sigma2 = (1.0 + var / (mean * mean)).ln();
        let mu = mean.ln() - sigma2 / 2.0;
        let dist = LogNormal::new(mu, sigma2.sqrt())
            .map_err(|e| Error::InvalidConfig(format!("lognormal({mean}, {var}): {e}")))?;
        Ok(MomentLogNormal {
            mean,
            dist: Some(dist),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.dist {
            Some(d) => d.sample(rng),
            None => self.mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WorkloadClass {
    Intercepting(InterceptionClass),
    /// Requests that never pause; `prompt` gives their prompt length.
    Plain { prompt: Moments },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub class: WorkloadClass,
    pub weight: f64,
}

fn default_max_seq_len() -> u32 {
    4096
}

fn default_first_decode() -> Moments {
    Moments::new(48.0, 48.0 * 48.0)
}

fn default_final_decode() -> Moments {
    Moments::new(64.0, 64.0 * 64.0)
}

/// Everything `generate_trace` needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub mixture: Vec<MixtureEntry>,
    pub request_count: usize,
    pub arrival_rate: f64,
    pub seed: u64,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: u32,
    /// Tokens decoded before the first interception.
    #[serde(default = "default_first_decode")]
    pub first_decode: Moments,
    /// Tokens decoded after the last interception.
    #[serde(default = "default_final_decode")]
    pub final_decode: Moments,
}

impl GenSpec {
    /// Uniform mixture over the given built-in classes.
    pub fn uniform(classes: &[ClassName], request_count: usize, arrival_rate: f64, seed: u64) -> Self {
        let weight = 1.0 / classes.len().max(1) as f64;
        GenSpec {
            mixture: classes
                .iter()
                .map(|&c| MixtureEntry {
                    class: WorkloadClass::Intercepting(InterceptionClass::builtin(c)),
                    weight,
                })
                .collect(),
            request_count,
            arrival_rate,
            seed,
            max_seq_len: default_max_seq_len(),
            first_decode: default_first_decode(),
            final_decode: default_final_decode(),
        }
    }

    /// The six-class mixed workload.
    pub fn mixed(request_count: usize, arrival_rate: f64, seed: u64) -> Self {
        Self::uniform(&ClassName::ALL, request_count, arrival_rate, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mixture.is_empty() {
            return Err(Error::InvalidConfig("mixture must not be empty".into()));
        }
        if !(self.arrival_rate.is_finite() && self.arrival_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "arrival rate must be positive, got {}",
                self.arrival_rate
            )));
        }
        if self.request_count == 0 {
            return Err(Error::InvalidConfig("request_count must be at least 1".into()));
        }
        if self.max_seq_len < 4 {
            return Err(Error::InvalidConfig("max_seq_len must be at least 4".into()));
        }
        if self.mixture.iter().any(|e| !(e.weight.is_finite() && e.weight >= 0.0)) {
            return Err(Error::InvalidConfig("mixture weights must be non-negative".into()));
        }
        let total: f64 = self.mixture.iter().map(|e| e.weight).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "mixture weights must sum to 1, got {total}"
            )));
        }
        for e in &self.mixture {
            if let WorkloadClass::Intercepting(c) = &e.class {
                c.validate()?;
            }
        }
        Ok(())
    }
}

struct ClassSampler {
    duration: MomentLogNormal,
    count: MomentLogNormal,
    context: MomentLogNormal,
    return_tokens: u32,
    name: ClassName,
}

enum Sampler {
    Intercepting(ClassSampler),
    Plain(MomentLogNormal),
}

fn round_tokens(x: f64) -> u64 {
    x.round().max(0.0) as u64
}

/// Synthesizes a trace. Identical `spec` values produce identical traces.
pub fn generate_trace(spec: &GenSpec) -> Result<Vec<Request>> {
    spec.validate()?;
    let samplers = spec
        .mixture
        .iter()
        .map(|e| {
            Ok(match &e.class {
                WorkloadClass::Intercepting(c) => Sampler::Intercepting(ClassSampler {
                    duration: MomentLogNormal::new(c.duration_mean, c.duration_var)?,
                    count: MomentLogNormal::new(c.count_mean, c.count_var)?,
                    context: MomentLogNormal::new(c.context_mean, c.context_var)?,
                    return_tokens: round_tokens(c.return_tokens_mean) as u32,
                    name: c.name,
                }),
                WorkloadClass::Plain { prompt } => Sampler::Plain(prompt.sampler()?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let first_decode = spec.first_decode.sampler()?;
    let final_decode = spec.final_decode.sampler()?;
    let cumulative: Vec<f64> = spec
        .mixture
        .iter()
        .scan(0.0, |acc, e| {
            *acc += e.weight;
            Some(*acc)
        })
        .collect();

    let mut arrivals_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    arrivals_rng.set_stream(ARRIVAL_STREAM);
    let mut body_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    body_rng.set_stream(BODY_STREAM);
    let gaps = Exp::new(spec.arrival_rate)
        .map_err(|e| Error::InvalidConfig(format!("arrival rate: {e}")))?;

    let mut now = 0.0;
    let mut out = Vec::with_capacity(spec.request_count);
    for id in 0..spec.request_count as u64 {
        now += gaps.sample(&mut arrivals_rng);
        let u: f64 = body_rng.random::<f64>() * cumulative.last().copied().unwrap_or(1.0);
        let pick = cumulative.iter().position(|&c| u < c).unwrap_or(samplers.len() - 1);
        let mut req = match &samplers[pick] {
            Sampler::Intercepting(cs) => {
                build_intercepting(cs, &first_decode, &final_decode, spec.max_seq_len, &mut body_rng)
            }
            Sampler::Plain(prompt) => {
                build_plain(prompt, &final_decode, spec.max_seq_len, &mut body_rng)
            }
        };
        req.id = id;
        req.arrival = now;
        out.push(req);
    }
    Ok(out)
}

fn build_plain(
    prompt: &MomentLogNormal,
    final_decode: &MomentLogNormal,
    max_seq: u32,
    rng: &mut ChaCha8Rng,
) -> Request {
    let max_seq = u64::from(max_seq);
    let prompt_tokens = round_tokens(prompt.sample(rng)).clamp(1, max_seq - 1);
    let decode = round_tokens(final_decode.sample(rng)).clamp(1, max_seq - prompt_tokens);
    Request {
        id: 0,
        arrival: 0.0,
        prompt_tokens: prompt_tokens as u32,
        segments: vec![Segment {
            decode_tokens: decode as u32,
            interception: None,
        }],
    }
}

fn build_intercepting(
    cs: &ClassSampler,
    first_decode: &MomentLogNormal,
    final_decode: &MomentLogNormal,
    max_seq: u32,
    rng: &mut ChaCha8Rng,
) -> Request {
    let max_seq = u64::from(max_seq);
    let ret = u64::from(cs.return_tokens);
    let count = round_tokens(cs.count.sample(rng)).max(1) as usize;

    // Target contexts, clamped so that at least the return tokens and one
    // final decode token still fit.
    let ceiling = max_seq.saturating_sub(ret + 1).max(2);
    let mut targets: Vec<u64> = (0..count)
        .map(|_| {
            let raw = round_tokens(cs.context.sample(rng));
            if raw > ceiling {
                log::warn!("context {raw} exceeds max sequence length, clamped to {ceiling}");
            }
            raw.clamp(2, ceiling)
        })
        .collect();
    targets.sort_unstable();
    let durations: Vec<f64> = (0..count).map(|_| cs.duration.sample(rng).max(0.0)).collect();
    let first = round_tokens(first_decode.sample(rng)).max(1);
    let mut tail = round_tokens(final_decode.sample(rng)).max(1);

    // Contexts must grow by at least the previous return plus one decode.
    let mut contexts = targets.clone();
    for j in 1..count {
        contexts[j] = contexts[j].max(contexts[j - 1] + ret + 1);
    }
    // Shift back toward the sampled mean when the spacing pushed it up.
    let raw_mean = targets.iter().sum::<u64>() / count as u64;
    let adj_mean = contexts.iter().sum::<u64>() / count as u64;
    let shift = adj_mean.saturating_sub(raw_mean).min(contexts[0] - 2);
    contexts.iter_mut().for_each(|c| *c -= shift);

    let mut kept = count;
    while kept > 1 && contexts[kept - 1] + ret + 1 > max_seq {
        kept -= 1;
    }
    if kept < count {
        log::warn!(
            "dropped {} interceptions that did not fit the max sequence length",
            count - kept
        );
    }
    contexts.truncate(kept);
    let last = contexts[kept - 1];
    tail = tail.min(max_seq.saturating_sub(last + ret)).max(1);

    let first = first.min(contexts[0] - 1);
    let prompt = contexts[0] - first;
    let mut segments = Vec::with_capacity(kept + 1);
    for j in 0..kept {
        let decode = if j == 0 {
            first
        } else {
            contexts[j] - contexts[j - 1] - ret
        };
        segments.push(Segment {
            decode_tokens: decode as u32,
            interception: Some(Interception {
                kind: cs.name,
                duration: durations[j],
                return_tokens: cs.return_tokens,
            }),
        });
    }
    segments.push(Segment {
        decode_tokens: tail as u32,
        interception: None,
    });
    Request {
        id: 0,
        arrival: 0.0,
        prompt_tokens: prompt as u32,
        segments,
    }
}

/// Rescales arrival times so the trace's Poisson rate changes from
/// `from_rate` to `to_rate`; request bodies are untouched.
pub fn rescale_arrivals(trace: &[Request], from_rate: f64, to_rate: f64) -> Vec<Request> {
    let factor = from_rate / to_rate;
    trace
        .iter()
        .map(|r| Request {
            arrival: r.arrival * factor,
            ..r.clone()
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    format: String,
    version: u32,
}

pub fn write_trace<W: Write>(mut out: W, trace: &[Request]) -> std::io::Result<()> {
    let header = TraceHeader {
        format: TRACE_FORMAT.into(),
        version: TRACE_VERSION,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for r in trace {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_trace(path: impl AsRef<Path>, trace: &[Request]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace(BufWriter::new(file), trace).map_err(|e| Error::io(path, e))
}

/// Parses a trace from any reader; `origin` is used in error messages.
pub fn read_trace<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<Request>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut header_seen = false;
    let mut trace = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if !header_seen {
            let header: TraceHeader = serde_json::from_str(text)
                .map_err(|e| parse_err(lineno, format!("expected trace header: {e}")))?;
            if header.format != TRACE_FORMAT || header.version != TRACE_VERSION {
                return Err(parse_err(
                    lineno,
                    format!(
                        "unsupported trace header {}/{}",
                        header.format, header.version
                    ),
                ));
            }
            header_seen = true;
            continue;
        }
        let req: Request =
            serde_json::from_str(text).map_err(|e| parse_err(lineno, e.to_string()))?;
        req.validate()
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        trace.push(req);
    }
    if !header_seen {
        return Err(parse_err(1, "missing trace header".into()));
    }
    let mut ids: Vec<RequestId> = trace.iter().map(|r| r.id).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Validation(format!("duplicate request id {}", w[0])));
    }
    trace.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id)));
    Ok(trace)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<Request>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(BufReader::new(file), path)
}

/// Per-class empirical statistics, for eyeballing a trace against its spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: String,
    pub requests: usize,
    pub duration: Moments,
    pub count: Moments,
    pub context: Moments,
}

fn moments(xs: &[f64]) -> Moments {
    if xs.is_empty() {
        return Moments::new(0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Moments::new(mean, var)
}

pub fn trace_stats(trace: &[Request]) -> Vec<ClassStats> {
    let mut labels: Vec<&'static str> = trace.iter().map(Request::class_label).collect();
    labels.sort_unstable();
    labels.dedup();
    labels
        .into_iter()
        .map(|label| {
            let reqs: Vec<&Request> = trace.iter().filter(|r| r.class_label() == label).collect();
            let durations: Vec<f64> = reqs
                .iter()
                .flat_map(|r| r.interceptions().map(|i| i.duration))
                .collect();
            let counts: Vec<f64> = reqs
                .iter()
                .map(|r| r.interceptions().count() as f64)
                .collect();
            let contexts: Vec<f64> = reqs
                .iter()
                .flat_map(|r| r.interception_contexts())
                .map(|c| c as f64)
                .collect();
            ClassStats {
                class: label.to_string(),
                requests: reqs.len(),
                duration: moments(&durations),
                count: moments(&counts),
                context: moments(&contexts),
            }
        })
        .collect()
}
