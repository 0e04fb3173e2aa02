//! Synthetic data generation, shard construction, the held-out stream, and the
//! principal's private signals.
//!
//! All randomness flows through one seeded generator in a fixed draw order
//! (inputs, noise, shard assignment, signals), so identical configurations
//! reproduce identical outputs.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HypothesisSpec, ParameterVector};

/// Inputs are drawn uniformly from `[-HALF_WIDTH, HALF_WIDTH]^d`.
pub const INPUT_BOX_HALF_WIDTH: f64 = 2.0;

/// One observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub x: Vec<f64>,
    pub y: f64,
}

/// One agent's local sample. Nonempty by construction; all inputs share a
/// dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataShard {
    shard_id: usize,
    points: Vec<DataPoint>,
}

impl DataShard {
    pub fn new(shard_id: usize, points: Vec<DataPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidState("shard must be nonempty".into()));
        }
        let dim = points[0].x.len();
        for p in &points {
            if p.x.len() != dim {
                return Err(Error::InvalidArgument(
                    "all shard inputs must share one dimension".into(),
                ));
            }
            if !p.y.is_finite() || p.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(
                    "shard entries must be finite".into(),
                ));
            }
        }
        Ok(DataShard { shard_id, points })
    }

    pub fn shard_id(&self) -> usize {
        self.shard_id
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Input dimension shared by every point.
    pub fn dim(&self) -> usize {
        self.points[0].x.len()
    }
}

/// How the held-out datum for round `t` is chosen from the reserved pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DrawMode {
    /// Always the first pool entry; supports exact regression tests.
    FixedFirst,
    /// `pool[t mod pool_size]`.
    FreshEachRound,
}

/// The principal's reserve of out-of-sample data, disjoint from every shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutStream {
    pool: Vec<DataPoint>,
    pub draw_mode: DrawMode,
    pub seed: u64,
}

impl HeldOutStream {
    pub fn new(pool: Vec<DataPoint>, draw_mode: DrawMode, seed: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::InvalidState("held-out pool must be nonempty".into()));
        }
        Ok(HeldOutStream {
            pool,
            draw_mode,
            seed,
        })
    }

    pub fn pool(&self) -> &[DataPoint] {
        &self.pool
    }

    /// Returns the datum for the given round along with its pool index, the
    /// id under which the round logs it.
    pub fn draw(&self, round: usize) -> (usize, &DataPoint) {
        let idx = match self.draw_mode {
            DrawMode::FixedFirst => 0,
            DrawMode::FreshEachRound => round % self.pool.len(),
        };
        (idx, &self.pool[idx])
    }
}

/// Where the principal's private signals come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalProvenance {
    /// `s_i ~ N(0, I_{d_s})`, independent of the shards.
    IidGaussian,
    /// `s_i = (mean shard target, mean input norm)`; carries shard information.
    ShardSummary,
}

/// The `k` private signal vectors available only to the principal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivateSignals {
    signals: Vec<Vec<f64>>,
}

impl PrivateSignals {
    pub fn new(signals: Vec<Vec<f64>>) -> Result<Self> {
        if signals.is_empty() {
            return Err(Error::InvalidArgument("need at least one signal".into()));
        }
        let dim = signals[0].len();
        if dim == 0 {
            return Err(Error::InvalidArgument("signal dimension must be >= 1".into()));
        }
        for s in &signals {
            if s.len() != dim || s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(
                    "signals must share a dimension and be finite".into(),
                ));
            }
        }
        Ok(PrivateSignals { signals })
    }

    pub fn count(&self) -> usize {
        self.signals.len()
    }

    pub fn dim(&self) -> usize {
        self.signals[0].len()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.signals[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.signals.iter().map(|s| s.as_slice())
    }
}

/// How the source dataset is split into shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShardMode {
    /// Disjoint split; shard sizes sum to `n`.
    Partition,
    BootstrapWithReplacement,
    BootstrapWithoutReplacement,
}

/// Everything the generator needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub theta_star: ParameterVector,
    pub spec: HypothesisSpec,
    pub noise_std: f64,
    pub n: usize,
    pub k: usize,
    pub shard_mode: ShardMode,
    pub heldout_size: usize,
    pub heldout_mode: DrawMode,
    pub signal_provenance: SignalProvenance,
    /// Signal dimension for [`SignalProvenance::IidGaussian`]; the shard
    /// summary always has dimension 2.
    pub signal_dim: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if self.n < self.k {
            return Err(Error::InvalidArgument(format!(
                "n = {} must be >= k = {}",
                self.n, self.k
            )));
        }
        if self.heldout_size == 0 {
            return Err(Error::InvalidArgument("heldout_size must be >= 1".into()));
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::InvalidArgument("noise_std must be > 0".into()));
        }
        if self.theta_star.len() != self.spec.param_dim() {
            return Err(Error::InvalidArgument(format!(
                "theta_star has length {}, spec expects {}",
                self.theta_star.len(),
                self.spec.param_dim()
            )));
        }
        if self.signal_provenance == SignalProvenance::IidGaussian && self.signal_dim == 0 {
            return Err(Error::InvalidArgument("signal_dim must be >= 1".into()));
        }
        Ok(())
    }
}

fn shard_sizes(n: usize, k: usize) -> Vec<usize> {
    let base = n / k;
    let extra = n % k;
    (0..k).map(|i| base + usize::from(i < extra)).collect()
}

/// Generates shards, the held-out pool, and the private signals from one
/// seeded stream.
pub fn generate(
    config: &GeneratorConfig,
) -> Result<(Vec<DataShard>, HeldOutStream, PrivateSignals)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.spec.input_dim();
    let noise = Normal::new(0.0, config.noise_std)
        .map_err(|e| Error::InvalidArgument(format!("noise distribution: {e}")))?;

    let total = config.n + config.heldout_size;
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(total);
    for _ in 0..total {
        xs.push(
            (0..d)
                .map(|_| rng.gen_range(-INPUT_BOX_HALF_WIDTH..INPUT_BOX_HALF_WIDTH))
                .collect(),
        );
    }
    let mut points: Vec<DataPoint> = Vec::with_capacity(total);
    for x in xs {
        let clean = config.spec.predict(&config.theta_star, &x)?;
        let y = clean + noise.sample(&mut rng);
        points.push(DataPoint { x, y });
    }
    let pool = points.split_off(config.n);
    let source = points;

    let sizes = shard_sizes(config.n, config.k);
    let shards: Vec<DataShard> = match config.shard_mode {
        ShardMode::Partition => {
            let mut order: Vec<usize> = (0..config.n).collect();
            order.shuffle(&mut rng);
            let mut shards = Vec::with_capacity(config.k);
            let mut cursor = 0;
            for (i, &size) in sizes.iter().enumerate() {
                let idx = &order[cursor..cursor + size];
                cursor += size;
                shards.push(DataShard::new(
                    i + 1,
                    idx.iter().map(|&j| source[j].clone()).collect(),
                )?);
            }
            shards
        }
        ShardMode::BootstrapWithReplacement => {
            let mut shards = Vec::with_capacity(config.k);
            for (i, &size) in sizes.iter().enumerate() {
                let pts = (0..size)
                    .map(|_| source[rng.gen_range(0..config.n)].clone())
                    .collect();
                shards.push(DataShard::new(i + 1, pts)?);
            }
            shards
        }
        ShardMode::BootstrapWithoutReplacement => {
            let mut shards = Vec::with_capacity(config.k);
            for (i, &size) in sizes.iter().enumerate() {
                // Partial Fisher-Yates: the first `size` entries are a
                // uniform sample without replacement.
                let mut order: Vec<usize> = (0..config.n).collect();
                for j in 0..size {
                    let swap = rng.gen_range(j..config.n);
                    order.swap(j, swap);
                }
                shards.push(DataShard::new(
                    i + 1,
                    order[..size].iter().map(|&j| source[j].clone()).collect(),
                )?);
            }
            shards
        }
    };

    let signals = match config.signal_provenance {
        SignalProvenance::IidGaussian => {
            let mut s = Vec::with_capacity(config.k);
            for _ in 0..config.k {
                s.push(
                    (0..config.signal_dim)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect(),
                );
            }
            PrivateSignals::new(s)?
        }
        SignalProvenance::ShardSummary => {
            let s = shards
                .iter()
                .map(|shard| {
                    let inv = 1.0 / shard.len() as f64;
                    let mean_y: f64 = shard.points().iter().map(|p| p.y).sum::<f64>() * inv;
                    let mean_norm: f64 = shard
                        .points()
                        .iter()
                        .map(|p| p.x.iter().map(|v| v * v).sum::<f64>().sqrt())
                        .sum::<f64>()
                        * inv;
                    vec![mean_y, mean_norm]
                })
                .collect();
            PrivateSignals::new(s)?
        }
    };

    let stream = HeldOutStream::new(pool, config.heldout_mode, config.seed)?;
    Ok((shards, stream, signals))
}

/// Formats a float with 17 significant digits, enough to reproduce any f64
/// exactly on reparse.
pub fn fmt_g17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes shards and the held-out pool as CSV with columns
/// `x_1..x_d, y, shard_id`; held-out rows carry `shard_id = 0`.
pub fn dump_csv<W: Write>(
    out: &mut W,
    shards: &[DataShard],
    stream: &HeldOutStream,
) -> Result<()> {
    let dim = shards
        .first()
        .map(DataShard::dim)
        .ok_or_else(|| Error::InvalidArgument("no shards to dump".into()))?;
    let header: Vec<String> = (1..=dim)
        .map(|i| format!("x_{i}"))
        .chain(["y".to_string(), "shard_id".to_string()])
        .collect();
    writeln!(out, "{}", header.join(","))?;
    let write_point = |out: &mut W, p: &DataPoint, id: usize| -> Result<()> {
        let mut row: Vec<String> = p.x.iter().map(|&v| fmt_g17(v)).collect();
        row.push(fmt_g17(p.y));
        row.push(id.to_string());
        writeln!(out, "{}", row.join(","))?;
        Ok(())
    };
    for shard in shards {
        for p in shard.points() {
            write_point(out, p, shard.shard_id())?;
        }
    }
    for p in stream.pool() {
        write_point(out, p, 0)?;
    }
    Ok(())
}

/// Reads a dataset written by [`dump_csv`]. The held-out pool comes back with
/// the supplied draw mode and seed.
pub fn load_csv<R: BufRead>(
    input: R,
    draw_mode: DrawMode,
    seed: u64,
) -> Result<(Vec<DataShard>, HeldOutStream)> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty CSV".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 1] != "shard_id" || cols[cols.len() - 2] != "y" {
        return Err(Error::InvalidArgument(
            "CSV header must end with `y,shard_id`".into(),
        ));
    }
    let dim = cols.len() - 2;
    let mut by_shard: Vec<(usize, Vec<DataPoint>)> = Vec::new();
    let mut pool = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::InvalidArgument(format!(
                "line {}: expected {} fields, found {}",
                lineno + 2,
                dim + 2,
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("line {}: {e}", lineno + 2)))
        };
        let x = fields[..dim].iter().map(|s| parse(s)).collect::<Result<Vec<f64>>>()?;
        let y = parse(fields[dim])?;
        let id: usize = fields[dim + 1]
            .parse()
            .map_err(|e| Error::InvalidArgument(format!("line {}: {e}", lineno + 2)))?;
        let point = DataPoint { x, y };
        if id == 0 {
            pool.push(point);
        } else {
            match by_shard.iter_mut().find(|(sid, _)| *sid == id) {
                Some((_, pts)) => pts.push(point),
                None => by_shard.push((id, vec![point])),
            }
        }
    }
    let shards = by_shard
        .into_iter()
        .map(|(id, pts)| DataShard::new(id, pts))
        .collect::<Result<Vec<_>>>()?;
    let stream = HeldOutStream::new(pool, draw_mode, seed)?;
    Ok((shards, stream))
}
