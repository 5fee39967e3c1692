//! Request streams: seeded Poisson generation, shifted-output workloads and
//! a line-oriented trace format.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Resolution, INTERNVL2_26B, INTERNVL2_8B, MINICPM_V_2_6};

/// Per-request latency targets, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slo {
    pub ttft: f64,
    pub tpot: f64,
}

impl Slo {
    pub const fn new(ttft: f64, tpot: f64) -> Self {
        Self { ttft, tpot }
    }
}

/// One multimodal inference job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival: f64,
    pub prompt_tokens: u64,
    pub images: Vec<Resolution>,
    pub output_tokens: u64,
    pub slo: Slo,
}

impl Request {
    pub fn text_only(id: u64, arrival: f64, prompt_tokens: u64, output_tokens: u64) -> Self {
        Self {
            id,
            arrival,
            prompt_tokens,
            images: Vec::new(),
            output_tokens,
            slo: Slo::new(f64::INFINITY, f64::INFINITY),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.arrival >= 0.0 && self.arrival.is_finite()) {
            return Err(Error::invalid("request", format!("{}: arrival must be >= 0", self.id)));
        }
        if self.output_tokens == 0 {
            return Err(Error::invalid("request", format!("{}: output_tokens must be >= 1", self.id)));
        }
        if !(self.slo.ttft > 0.0 && self.slo.tpot > 0.0) {
            return Err(Error::invalid("request", format!("{}: SLO limits must be > 0", self.id)));
        }
        Ok(())
    }
}

/// Parameters of a synthetic open-loop workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Poisson arrival rate, requests/second.
    pub rate: f64,
    pub num_requests: usize,
    pub prompt_tokens: u64,
    pub images_per_request: usize,
    pub resolution: Resolution,
    pub output_tokens: u64,
    pub seed: u64,
    pub slo: Slo,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::invalid("workload", "rate must be > 0"));
        }
        if self.num_requests == 0 {
            return Err(Error::invalid("workload", "num_requests must be >= 1"));
        }
        if self.output_tokens == 0 {
            return Err(Error::invalid("workload", "output_tokens must be >= 1"));
        }
        Ok(())
    }

    pub fn with_rate(&self, rate: f64) -> Self {
        Self {
            rate,
            ..self.clone()
        }
    }
}

/// Cumulative arrival times with i.i.d. exponential gaps of mean `1/rate`.
pub fn poisson_arrivals(rate: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(rate).expect("rate validated > 0");
    let mut t = 0.0;
    (0..n)
        .map(|_| {
            t += gap.sample(&mut rng);
            t
        })
        .collect()
}

fn build(spec: &WorkloadSpec, outputs: impl Iterator<Item = u64>) -> Vec<Request> {
    poisson_arrivals(spec.rate, spec.num_requests, spec.seed)
        .into_iter()
        .zip(outputs)
        .enumerate()
        .map(|(i, (arrival, output_tokens))| Request {
            id: i as u64,
            arrival,
            prompt_tokens: spec.prompt_tokens,
            images: vec![spec.resolution; spec.images_per_request],
            output_tokens,
            slo: spec.slo,
        })
        .collect()
}

pub fn generate_poisson(spec: &WorkloadSpec) -> Result<Vec<Request>> {
    spec.validate()?;
    Ok(build(spec, std::iter::repeat(spec.output_tokens)))
}

/// Poisson arrivals where the first `early.0` requests generate `early.1`
/// output tokens and the next `late.0` generate `late.1`.
pub fn generate_shifted(
    spec: &WorkloadSpec,
    early: (usize, u64),
    late: (usize, u64),
) -> Result<Vec<Request>> {
    spec.validate()?;
    if early.0 + late.0 != spec.num_requests {
        return Err(Error::invalid(
            "workload",
            format!(
                "split {} + {} does not equal num_requests {}",
                early.0, late.0, spec.num_requests
            ),
        ));
    }
    if (early.0 > 0 && early.1 == 0) || (late.0 > 0 && late.1 == 0) {
        return Err(Error::invalid("workload", "output_tokens must be >= 1"));
    }
    let outputs = std::iter::repeat_n(early.1, early.0).chain(std::iter::repeat_n(late.1, late.0));
    Ok(build(spec, outputs))
}

/// SLO limits used for a given model and image count.
pub fn slo_for(model: &str, images_per_request: usize) -> Option<Slo> {
    // (images, ttft, tpot) per model.
    let table: &[(usize, f64, f64)] = match model {
        MINICPM_V_2_6 => &[(2, 1.40, 0.04), (4, 2.60, 0.04), (6, 3.90, 0.06), (8, 5.10, 0.06)],
        INTERNVL2_8B => &[(2, 1.20, 0.05), (4, 2.40, 0.06), (6, 3.55, 0.09), (8, 5.00, 0.18)],
        INTERNVL2_26B => &[(2, 3.50, 0.07), (4, 7.05, 0.08), (6, 11.00, 0.95), (8, 15.00, 0.15)],
        _ => return None,
    };
    table
        .iter()
        .find(|(n, _, _)| *n == images_per_request)
        .map(|&(_, ttft, tpot)| Slo::new(ttft, tpot))
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    id: u64,
    arrival: f64,
    prompt_tokens: u64,
    num_images: usize,
    width: u32,
    height: u32,
    output_tokens: u64,
}

/// How arrival times are taken when reading a trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arrivals {
    FromFile,
    /// Replace the file's arrivals with a fresh Poisson stream.
    Regenerate { rate: f64, seed: u64 },
}

/// Writes requests in the trace format. Every image of a request must share
/// one resolution.
pub fn write_trace<W: Write>(requests: &[Request], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in requests {
        let res = r.images.first().copied().unwrap_or(Resolution::new(0, 0));
        if r.images.iter().any(|&i| i != res) {
            return Err(Error::invalid(
                "trace",
                format!("request {} mixes image resolutions", r.id),
            ));
        }
        w.serialize(TraceRow {
            id: r.id,
            arrival: r.arrival,
            prompt_tokens: r.prompt_tokens,
            num_images: r.images.len(),
            width: res.width,
            height: res.height,
            output_tokens: r.output_tokens,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(input: R, slo: Slo, arrivals: Arrivals) -> Result<Vec<Request>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut requests = Vec::new();
    for row in reader.deserialize::<TraceRow>() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let request = Request {
            id: row.id,
            arrival: row.arrival,
            prompt_tokens: row.prompt_tokens,
            images: vec![Resolution::new(row.width, row.height); row.num_images],
            output_tokens: row.output_tokens,
            slo,
        };
        request.validate().map_err(|e| Error::Parse {
            line: requests.len() + 2,
            message: e.to_string(),
        })?;
        requests.push(request);
    }
    if let Arrivals::Regenerate { rate, seed } = arrivals {
        if !(rate > 0.0) {
            return Err(Error::invalid("workload", "rate must be > 0"));
        }
        let times = poisson_arrivals(rate, requests.len(), seed);
        for (r, t) in requests.iter_mut().zip(times) {
            r.arrival = t;
        }
    }
    if requests.windows(2).any(|w| w[1].arrival < w[0].arrival) {
        requests.sort_by(|a, b| a.arrival.total_cmp(&b.arrival));
    }
    Ok(requests)
}

pub fn load_trace(path: impl AsRef<Path>, slo: Slo, arrivals: Arrivals) -> Result<Vec<Request>> {
    read_trace(std::fs::File::open(path)?, slo, arrivals)
}

pub fn save_trace(path: impl AsRef<Path>, requests: &[Request]) -> Result<()> {
    write_trace(requests, std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> WorkloadSpec {
        WorkloadSpec {
            rate: 1.0,
            num_requests: 100,
            prompt_tokens: 22,
            images_per_request: 2,
            resolution: Resolution::new(4032, 3024),
            output_tokens: 10,
            seed: 7,
            slo: Slo::new(1.4, 0.04),
        }
    }

    #[test]
    fn poisson_mean_gap_in_envelope() {
        let reqs = generate_poisson(&spec()).unwrap();
        assert_eq!(reqs.len(), 100);
        let mean = reqs.last().unwrap().arrival / 100.0;
        assert!((0.7..=1.3).contains(&mean), "{mean}");
        assert!(reqs.windows(2).all(|w| w[0].arrival <= w[1].arrival));
        assert!(reqs.iter().all(|r| r.output_tokens == 10 && r.images.len() == 2));
    }

    #[test]
    fn single_request_is_positive() {
        let s = WorkloadSpec {
            num_requests: 1,
            ..spec()
        };
        let reqs = generate_poisson(&s).unwrap();
        assert_eq!(reqs.len(), 1);
        assert!(reqs[0].arrival >= 0.0);
    }

    #[test]
    fn same_seed_same_stream() {
        assert_eq!(generate_poisson(&spec()).unwrap(), generate_poisson(&spec()).unwrap());
        let other = WorkloadSpec { seed: 8, ..spec() };
        assert_ne!(generate_poisson(&spec()).unwrap(), generate_poisson(&other).unwrap());
    }

    #[test]
    fn shifted_split() {
        let s = WorkloadSpec { rate: 3.0, ..spec() };
        let reqs = generate_shifted(&s, (10, 50), (90, 500)).unwrap();
        assert!(reqs[..10].iter().all(|r| r.output_tokens == 50));
        assert!(reqs[10..].iter().all(|r| r.output_tokens == 500));
        let uniform = generate_shifted(&s, (0, 1), (100, 10)).unwrap();
        assert_eq!(uniform, generate_poisson(&s).unwrap());
        assert!(generate_shifted(&s, (10, 50), (10, 500)).is_err());
    }

    #[test]
    fn slo_table_lookup() {
        assert_eq!(slo_for(MINICPM_V_2_6, 4), Some(Slo::new(2.6, 0.04)));
        assert_eq!(slo_for(INTERNVL2_26B, 8), Some(Slo::new(15.0, 0.15)));
        assert_eq!(slo_for(INTERNVL2_8B, 3), None);
        assert_eq!(slo_for("other", 2), None);
    }

    #[test]
    fn empty_trace() {
        let text = "id,arrival,prompt_tokens,num_images,width,height,output_tokens\n";
        let reqs = read_trace(text.as_bytes(), Slo::new(1.0, 1.0), Arrivals::FromFile).unwrap();
        assert!(reqs.is_empty());
        let reqs = read_trace("".as_bytes(), Slo::new(1.0, 1.0), Arrivals::FromFile).unwrap();
        assert!(reqs.is_empty());
    }

    #[test]
    fn two_line_trace() {
        let text = "id,arrival,prompt_tokens,num_images,width,height,output_tokens\n\
                    0,0.5,4,8,640,480,10\n\
                    1,1.25,21,0,0,0,3\n";
        let reqs = read_trace(text.as_bytes(), Slo::new(2.0, 0.1), Arrivals::FromFile).unwrap();
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[0].images, vec![Resolution::new(640, 480); 8]);
        assert_eq!(reqs[1].arrival, 1.25);
        assert_eq!(reqs[1].prompt_tokens, 21);
        assert!(reqs[1].images.is_empty());
        let regen = read_trace(
            text.as_bytes(),
            Slo::new(2.0, 0.1),
            Arrivals::Regenerate { rate: 2.0, seed: 1 },
        )
        .unwrap();
        assert_eq!(regen[0].arrival, poisson_arrivals(2.0, 2, 1)[0]);
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "id,arrival,prompt_tokens,num_images,width,height,output_tokens\n\
                    0,0.5,4,1,640,480,10\n\
                    1,oops,4,1,640,480,10\n";
        match read_trace(text.as_bytes(), Slo::new(1.0, 1.0), Arrivals::FromFile) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let zero_out = "id,arrival,prompt_tokens,num_images,width,height,output_tokens\n\
                        0,0.5,4,1,640,480,0\n";
        assert!(matches!(
            read_trace(zero_out.as_bytes(), Slo::new(1.0, 1.0), Arrivals::FromFile),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn round_trip() {
        let reqs = generate_shifted(&spec(), (30, 5), (70, 50)).unwrap();
        let mut buf = Vec::new();
        write_trace(&reqs, &mut buf).unwrap();
        let back = read_trace(buf.as_slice(), spec().slo, Arrivals::FromFile).unwrap();
        assert_eq!(reqs, back);
    }
}
