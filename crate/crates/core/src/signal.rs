//! Signal construction: convex blending, linear normalization, seeded
//! report noise and a client for externally computed signals.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decision::{DecisionContext, Signal, SignalSource};
use crate::error::{Error, Result};

/// `alpha * dense + (1 - alpha) * llm`, tagged as a composite signal.
pub fn blend_composite(p_dense: &Signal, p_llm: &Signal, alpha: f64) -> Result<Signal> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", format!("{alpha} outside [0, 1]")));
    }
    let value = alpha * p_dense.value + (1.0 - alpha) * p_llm.value;
    // guard against 1.0000000000000002 from rounding
    let value = value.clamp(p_dense.value.min(p_llm.value), p_dense.value.max(p_llm.value));
    Signal::new("p_hat", value, SignalSource::Composite)
}

/// Maps `[lo, hi]` onto `[0, 1]`, clamping outside values.
pub fn normalize_linear(x: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(lo < hi) {
        return Err(Error::config("normalize.bounds", format!("need lo < hi, got ({lo}, {hi})")));
    }
    Ok(((x - lo) / (hi - lo)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub false_negative_rate: f64,
    pub false_positive_rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            false_negative_rate: 0.0,
            false_positive_rate: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, rate) in [
            ("false_negative_rate", self.false_negative_rate),
            ("false_positive_rate", self.false_positive_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::config(name, format!("{rate} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.false_negative_rate == 0.0 && self.false_positive_rate == 0.0
    }
}

/// Flips each field of a boolean report with the configured rates.
/// Fields are visited in key order, one uniform draw per field.
pub fn apply_noise(report: &BTreeMap<String, bool>, spec: &NoiseSpec) -> BTreeMap<String, bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    report
        .iter()
        .map(|(field, &present)| {
            let u: f64 = rng.gen();
            let flipped = if present {
                u < spec.false_negative_rate
            } else {
                u < spec.false_positive_rate
            };
            (field.clone(), present ^ flipped)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalEstimatorEndpoint {
    /// `host:port`
    pub address: String,
    pub timeout_ms: u64,
    pub signal_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireContext {
    pub signals: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, bool>,
    pub counters: BTreeMap<String, u64>,
    pub history: Vec<String>,
}

impl From<&DecisionContext> for WireContext {
    fn from(ctx: &DecisionContext) -> Self {
        WireContext {
            signals: ctx.signals.iter().map(|(k, s)| (k.clone(), s.value)).collect(),
            flags: ctx.flags.clone(),
            counters: ctx.counters.clone(),
            history: ctx.history.clone(),
        }
    }
}

/// One request line sent to an external estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRequest {
    pub signal_name: String,
    pub context: WireContext,
}

/// One response line expected back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResponse {
    pub name: String,
    pub value: f64,
}

/// Sends the context to an estimator over TCP and reads its answer.
///
/// The exchange is one newline-terminated JSON document in each direction.
/// Out-of-range values are clamped into [0, 1] with a warning.
pub fn query_external_estimator(
    endpoint: &ExternalEstimatorEndpoint,
    ctx: &DecisionContext,
) -> Result<Signal> {
    if endpoint.timeout_ms == 0 {
        return Err(Error::config("timeout_ms", "must be positive"));
    }
    let timeout = Duration::from_millis(endpoint.timeout_ms);
    let unavailable = |what: &str, e: &dyn std::fmt::Display| {
        Error::EstimatorUnavailable(format!("{} ({what}): {e}", endpoint.address))
    };

    let addr = endpoint
        .address
        .to_socket_addrs()
        .map_err(|e| unavailable("resolve", &e))?
        .next()
        .ok_or_else(|| unavailable("resolve", &"no address"))?;
    let mut stream = TcpStream::connect_timeout(&addr, timeout).map_err(|e| unavailable("connect", &e))?;
    stream
        .set_read_timeout(Some(timeout))
        .and_then(|_| stream.set_write_timeout(Some(timeout)))
        .map_err(|e| unavailable("configure", &e))?;

    let request = EstimatorRequest {
        signal_name: endpoint.signal_name.clone(),
        context: WireContext::from(ctx),
    };
    let mut line = serde_json::to_string(&request)?;
    line.push('\n');
    stream
        .write_all(line.as_bytes())
        .and_then(|_| stream.flush())
        .map_err(|e| unavailable("send", &e))?;

    let mut reply = String::new();
    BufReader::new(&stream)
        .read_line(&mut reply)
        .map_err(|e| unavailable("receive", &e))?;
    let response: EstimatorResponse =
        serde_json::from_str(reply.trim()).map_err(|e| unavailable("malformed response", &e))?;
    Signal::clamped(response.name, response.value, SignalSource::External)
        .map_err(|e| unavailable("malformed response", &e))
}
