//! Synthetic request traces: gamma-process arrivals with per-request decode
//! length and SLO factor drawn from a mixture of request classes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelId, Request};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestClass {
    /// Inclusive token range.
    pub decode_len: (u32, u32),
    /// Inclusive SLO-factor range.
    pub slo_factor: (f64, f64),
    pub proportion: f64,
}

impl RequestClass {
    pub fn new(decode_len: (u32, u32), slo_factor: (f64, f64), proportion: f64) -> Self {
        Self {
            decode_len,
            slo_factor,
            proportion,
        }
    }

    pub fn contains(&self, r: &Request) -> bool {
        (self.decode_len.0..=self.decode_len.1).contains(&r.decode_len)
            && r.slo_factor >= self.slo_factor.0
            && r.slo_factor <= self.slo_factor.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    /// Trace family 1-6, when built from a preset.
    #[serde(default)]
    pub trace_id: Option<u8>,
    pub classes: Vec<RequestClass>,
    /// Requests per second.
    pub rate: f64,
    /// Coefficient of variation of inter-arrival times.
    pub cv: f64,
    /// Seconds; the trace holds `round(rate * duration)` requests.
    pub duration: f64,
    pub model_mix: BTreeMap<ModelId, f64>,
    pub seed: u64,
}

pub fn uniform_mix(models: &[ModelId]) -> BTreeMap<ModelId, f64> {
    let p = 1.0 / models.len().max(1) as f64;
    models.iter().map(|m| (m.clone(), p)).collect()
}

/// Request classes of the six trace families.
pub fn trace_family(id: u8) -> Result<Vec<RequestClass>> {
    let short = (300, 500);
    let long = (600, 1000);
    let strict = (0.8, 1.0);
    let relaxed = (1.2, 1.5);
    Ok(match id {
        1 => vec![RequestClass::new((300, 1000), (0.8, 1.5), 1.0)],
        2 => vec![
            RequestClass::new(short, strict, 0.5),
            RequestClass::new(short, relaxed, 0.5),
        ],
        3 => vec![
            RequestClass::new(short, (0.8, 1.2), 0.5),
            RequestClass::new(long, (0.8, 1.2), 0.5),
        ],
        4 => vec![
            RequestClass::new(short, strict, 0.5),
            RequestClass::new(long, relaxed, 0.5),
        ],
        5 => vec![
            RequestClass::new(short, strict, 0.34),
            RequestClass::new(short, relaxed, 0.66),
        ],
        6 => vec![
            RequestClass::new(short, strict, 0.66),
            RequestClass::new(short, relaxed, 0.34),
        ],
        _ => return Err(Error::invalid(format!("no trace family {id}; expected 1-6"))),
    })
}

impl TraceConfig {
    pub fn preset(id: u8, rate: f64, cv: f64, duration: f64, models: &[ModelId], seed: u64) -> Result<Self> {
        Ok(Self {
            trace_id: Some(id),
            classes: trace_family(id)?,
            rate,
            cv,
            duration,
            model_mix: uniform_mix(models),
            seed,
        })
    }

    pub fn request_count(&self) -> usize {
        (self.rate * self.duration).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::invalid("trace needs at least one request class"));
        }
        let total: f64 = self.classes.iter().map(|c| c.proportion).sum();
        if (total - 1.0).abs() > 1e-9 || self.classes.iter().any(|c| !(c.proportion >= 0.0)) {
            return Err(Error::invalid(format!("class proportions sum to {total}, expected 1")));
        }
        for c in &self.classes {
            let (s0, s1) = c.decode_len;
            let (f0, f1) = c.slo_factor;
            if s0 == 0 || s0 > s1 || !(f0 > 0.0) || f0 > f1 || !f1.is_finite() {
                return Err(Error::invalid(format!("bad class ranges {c:?}")));
            }
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::invalid("rate must be > 0"));
        }
        if !(self.cv > 0.0 && self.cv.is_finite()) {
            return Err(Error::invalid("CV must be > 0"));
        }
        if !(self.duration >= 0.0) {
            return Err(Error::invalid("duration must be >= 0"));
        }
        if self.model_mix.is_empty() || self.model_mix.values().any(|p| !(*p >= 0.0)) {
            return Err(Error::invalid("model mix needs non-negative weights"));
        }
        Ok(())
    }
}

/// Inter-arrival distribution with mean `1 / rate` and coefficient of
/// variation `cv`: shape `1 / cv^2`, scale `cv^2 / rate`.
pub fn inter_arrival(rate: f64, cv: f64) -> Result<Gamma<f64>> {
    let cv2 = cv * cv;
    Gamma::new(1.0 / cv2, cv2 / rate).map_err(|e| Error::invalid(format!("gamma({cv}, {rate}): {e}")))
}

/// Generates `round(rate * duration)` requests sorted by strictly
/// increasing arrival time. Deterministic per seed.
pub fn generate_trace(cfg: &TraceConfig, time_slice: f64) -> Result<Vec<Request>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gaps = inter_arrival(cfg.rate, cfg.cv)?;
    let class_pick = WeightedIndex::new(cfg.classes.iter().map(|c| c.proportion))
        .map_err(|e| Error::invalid(format!("class proportions: {e}")))?;
    let models: Vec<&ModelId> = cfg.model_mix.keys().collect();
    let model_pick = WeightedIndex::new(cfg.model_mix.values().copied())
        .map_err(|e| Error::invalid(format!("model mix: {e}")))?;

    let n = cfg.request_count();
    let mut out = Vec::with_capacity(n);
    let mut clock = 0.0f64;
    for id in 0..n {
        let mut next = clock + gaps.sample(&mut rng);
        if id > 0 && next <= clock {
            next = clock.next_up();
        }
        clock = next;
        let class = &cfg.classes[class_pick.sample(&mut rng)];
        let decode_len = rng.random_range(class.decode_len.0..=class.decode_len.1);
        let (lo, hi) = class.slo_factor;
        let slo_factor = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let model = models[model_pick.sample(&mut rng)].clone();
        out.push(Request::new(id as u64, model, clock, decode_len, slo_factor, time_slice)?);
    }
    Ok(out)
}

pub fn save_trace(path: &Path, requests: &[Request]) -> Result<()> {
    crate::io::write_csv(path, requests)
}

pub fn load_trace(path: &Path) -> Result<Vec<Request>> {
    let reqs: Vec<Request> = crate::io::read_csv(path)?;
    if reqs.windows(2).any(|w| w[1].arrival < w[0].arrival) {
        return Err(Error::invalid(format!("{}: trace is not sorted by arrival", path.display())));
    }
    Ok(reqs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn models() -> Vec<ModelId> {
        vec!["a".into(), "b".into(), "c".into()]
    }

    #[test]
    fn trace_four_classes() {
        let c = trace_family(4).unwrap();
        assert_eq!(c[0], RequestClass::new((300, 500), (0.8, 1.0), 0.5));
        assert_eq!(c[1], RequestClass::new((600, 1000), (1.2, 1.5), 0.5));
        assert!(trace_family(7).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_sorted() {
        let cfg = TraceConfig::preset(4, 5.0, 2.0, 200.0, &models(), 7).unwrap();
        let a = generate_trace(&cfg, 0.05).unwrap();
        let b = generate_trace(&cfg, 0.05).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        assert!(a.windows(2).all(|w| w[0].arrival < w[1].arrival));
        for r in &a {
            assert!(cfg.classes.iter().any(|c| c.contains(r)));
            assert!((r.deadline - r.decode_len as f64 * r.slo_factor * 0.05).abs() < 1e-9);
        }
        let other = TraceConfig { seed: 8, ..cfg };
        assert_ne!(generate_trace(&other, 0.05).unwrap(), a);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = TraceConfig::preset(2, 1.0, 1.0, 10.0, &models(), 0).unwrap();
        cfg.classes[0].proportion = 0.7;
        assert!(generate_trace(&cfg, 0.05).is_err());
        let mut cfg = TraceConfig::preset(2, 1.0, 1.0, 10.0, &models(), 0).unwrap();
        cfg.classes[0].decode_len = (500, 300);
        assert!(generate_trace(&cfg, 0.05).is_err());
        let mut cfg = TraceConfig::preset(2, 1.0, 1.0, 10.0, &models(), 0).unwrap();
        cfg.cv = 0.0;
        assert!(generate_trace(&cfg, 0.05).is_err());
    }
}
