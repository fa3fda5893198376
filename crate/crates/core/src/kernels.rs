//! Random-variate generation and arrival/overflow bookkeeping.
//!
//! Every source of randomness in a replication draws from its own
//! [`RngStream`], so adding draws for one purpose never shifts another.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};

use crate::model::{Condition, SystemConfig};
use crate::{Error, Result};

/// What a stream is used for. Part of the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Conditions = 0,
    Travel = 1,
    Service = 2,
    Arrivals = 3,
    TieBreak = 4,
    /// Monte-Carlo checks and other instrumentation.
    Oracle = 5,
}

/// A seeded ChaCha stream identified by `(seed, replication, purpose)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
    replication: u64,
    purpose: Purpose,
}

impl RngStream {
    pub fn new(seed: u64, replication: u64, purpose: Purpose) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((replication << 8) | purpose as u64);
        Self {
            rng,
            replication,
            purpose,
        }
    }

    pub fn id(&self) -> (u64, Purpose) {
        (self.replication, self.purpose)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// The five streams a replication consumes.
#[derive(Debug, Clone)]
pub struct Streams {
    pub conditions: RngStream,
    pub travel: RngStream,
    pub service: RngStream,
    pub arrivals: RngStream,
    pub tie_break: RngStream,
}

impl Streams {
    pub fn new(seed: u64, replication: u64) -> Self {
        Self {
            conditions: RngStream::new(seed, replication, Purpose::Conditions),
            travel: RngStream::new(seed, replication, Purpose::Travel),
            service: RngStream::new(seed, replication, Purpose::Service),
            arrivals: RngStream::new(seed, replication, Purpose::Arrivals),
            tie_break: RngStream::new(seed, replication, Purpose::TieBreak),
        }
    }
}

/// SplitMix64 finalizer; used to derive child seeds from structured keys.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15_u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Travel time under `condition`: normal truncated to `(0, inf)` by rejection.
pub fn sample_travel_time<R: Rng + ?Sized>(
    condition: Condition,
    config: &SystemConfig,
    rng: &mut R,
) -> Result<f64> {
    let law = config
        .travel_law(condition)
        .ok_or_else(|| Error::Contract("no travel time for a stay".into()))?;
    if !(law.mean > 0.0) {
        return Err(Error::Contract(format!(
            "travel mean must be positive, got {}",
            law.mean
        )));
    }
    if law.sd == 0.0 {
        return Ok(law.mean);
    }
    let normal = Normal::new(law.mean, law.sd)
        .map_err(|e| Error::Contract(format!("travel law: {e}")))?;
    loop {
        let t = normal.sample(rng);
        if t > 0.0 {
            return Ok(t);
        }
    }
}

/// Service or idle-wait time: exponential with mean `1 / service_rate`.
pub fn sample_service_time<R: Rng + ?Sized>(config: &SystemConfig, rng: &mut R) -> f64 {
    Exp::new(config.service_rate)
        .expect("service rate validated positive")
        .sample(rng)
}

/// Poisson number of arrivals at `rate` over `duration`.
pub fn sample_arrivals<R: Rng + ?Sized>(rate: f64, duration: f64, rng: &mut R) -> u64 {
    let mean = rate * duration;
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
}

/// Adds `arrivals` to a queue of `queue` customers with capacity `buffer`.
/// Returns the new length and the number lost to overflow.
pub fn apply_arrivals(queue: u32, arrivals: u64, buffer: u32) -> Result<(u32, u64)> {
    if queue > buffer {
        return Err(Error::QueueBound {
            station: usize::MAX,
            queue,
            buffer,
        });
    }
    let total = u64::from(queue) + arrivals;
    let kept = total.min(u64::from(buffer));
    Ok((kept as u32, total - kept))
}

/// Fresh route conditions seen from `server`.
pub fn sample_conditions<R: Rng + ?Sized>(
    server: usize,
    config: &SystemConfig,
    rng: &mut R,
) -> Vec<Condition> {
    let mut out = vec![Condition::Stay; config.stations()];
    sample_conditions_into(server, config, rng, &mut out);
    out
}

pub(crate) fn sample_conditions_into<R: Rng + ?Sized>(
    server: usize,
    config: &SystemConfig,
    rng: &mut R,
    out: &mut [Condition],
) {
    let row = &config.p_good[server];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = if i == server {
            Condition::Stay
        } else if rng.random_bool(row[i]) {
            Condition::Good
        } else {
            Condition::Bad
        };
    }
}
