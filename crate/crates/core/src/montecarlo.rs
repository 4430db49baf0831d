//! Synthetic time-tag generation: pulse train, PZT sweep, clock, slow phase
//! drift and stochastic coincidence sampling.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_probability, Error, Result};
use crate::protocol::{FringeTable, OutcomePattern, Physics};

/// Symmetric triangle sweep of the reference phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PztWaveform {
    pub frequency: f64,
    pub phase_min: f64,
    pub phase_max: f64,
}

impl Default for PztWaveform {
    fn default() -> Self {
        Self {
            frequency: 600.0,
            phase_min: 0.0,
            phase_max: 4.0 * PI,
        }
    }
}

impl PztWaveform {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency.is_finite() && self.frequency > 0.0) {
            return Err(Error::invalid("frequency", "must be positive"));
        }
        ensure_finite("phase_min", self.phase_min)?;
        ensure_finite("phase_max", self.phase_max)?;
        if self.phase_max <= self.phase_min {
            return Err(Error::invalid("phase_max", "must exceed phase_min"));
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        1.0 / self.frequency
    }

    pub fn span(&self) -> f64 {
        self.phase_max - self.phase_min
    }

    /// Phase at waveform time `t`; the rise starts at `t = 0`.
    pub fn phase_at(&self, t: f64) -> f64 {
        let u = (t * self.frequency).rem_euclid(1.0);
        let frac = if u < 0.5 { 2.0 * u } else { 2.0 * (1.0 - u) };
        self.phase_min + self.span() * frac
    }
}

pub fn phase_at(t: f64, w: &PztWaveform) -> f64 {
    w.phase_at(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockEdge {
    /// Seconds since acquisition start (the first edge may be negative).
    pub time: f64,
    /// Rising edges mark the start of the upward sweep.
    pub rising: bool,
}

/// Square clock toggling at each PZT turning point.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClockSignal {
    pub edges: Vec<ClockEdge>,
}

impl ClockSignal {
    /// Edges covering `[0, duration]` for a waveform that is `offset`
    /// seconds into its period at acquisition start.
    pub fn generate(w: &PztWaveform, offset: f64, duration: f64) -> Self {
        let half = 0.5 * w.period();
        let first = (offset / half).floor() as i64;
        let last = ((duration + offset) / half).ceil() as i64;
        let edges = (first..=last)
            .map(|n| ClockEdge {
                time: n as f64 * half - offset,
                rising: n.rem_euclid(2) == 0,
            })
            .collect();
        Self { edges }
    }

    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.edges.first()?.time, self.edges.last()?.time))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftModel {
    None,
    /// One random offset per acquisition.
    #[default]
    Constant,
    /// Ornstein–Uhlenbeck process with correlation time `drift_timescale`.
    OrnsteinUhlenbeck,
}

/// Stationary standard deviation of the OU drift, chosen so that the RMS
/// change over one correlation time is 2π: `2s²(1 − e⁻¹) = (2π)²`.
pub fn ou_stationary_std() -> f64 {
    2.0 * PI / (2.0 * (1.0 - (-1.0f64).exp())).sqrt()
}

/// Interferometer phase drift seen by one acquisition.
#[derive(Debug, Clone)]
pub struct PhaseDrift {
    model: DriftModel,
    timescale: f64,
    value: f64,
    time: f64,
}

impl PhaseDrift {
    pub fn new<R: Rng>(model: DriftModel, timescale: f64, rng: &mut R) -> Result<Self> {
        if !(timescale.is_finite() && timescale > 0.0) {
            return Err(Error::invalid("drift_timescale", "must be positive"));
        }
        let value = match model {
            DriftModel::None => 0.0,
            DriftModel::Constant => rng.gen_range(0.0..2.0 * PI),
            DriftModel::OrnsteinUhlenbeck => ou_stationary_std() * rng.sample::<f64, _>(StandardNormal),
        };
        Ok(Self {
            model,
            timescale,
            value,
            time: 0.0,
        })
    }

    pub fn model(&self) -> DriftModel {
        self.model
    }

    /// Drift at time `t`, which must not precede the previous query.
    pub fn at<R: Rng>(&mut self, t: f64, rng: &mut R) -> f64 {
        if self.model == DriftModel::OrnsteinUhlenbeck && t > self.time {
            let decay = (-(t - self.time) / self.timescale).exp();
            let noise: f64 = rng.sample(StandardNormal);
            self.value = self.value * decay + ou_stationary_std() * (1.0 - decay * decay).sqrt() * noise;
        }
        self.time = self.time.max(t);
        self.value
    }
}

/// Convenience form of [`PhaseDrift`] for one-off sample paths.
pub fn apply_phase_drift<R: Rng>(drift: &mut PhaseDrift, t: f64, rng: &mut R) -> f64 {
    drift.at(t, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time_tag_ps: u64,
    pub pattern: OutcomePattern,
    pub herald: bool,
}

/// Baseline positions to scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Baselines {
    Grid { start: f64, step: f64, count: usize },
    List(Vec<f64>),
}

impl Baselines {
    pub fn points(&self) -> Vec<f64> {
        match self {
            Baselines::Grid { start, step, count } => (0..*count).map(|k| start + k as f64 * step).collect(),
            Baselines::List(v) => v.clone(),
        }
    }

    /// Keeps the first `n` points.
    pub fn truncated(&self, n: usize) -> Self {
        match self {
            Baselines::Grid { start, step, count } => Baselines::Grid {
                start: *start,
                step: *step,
                count: n.min(*count),
            },
            Baselines::List(v) => Baselines::List(v.iter().copied().take(n).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub baselines: Baselines,
    pub duration_per_point: f64,
    /// Pulse repetition rate; the pulse period is rounded to whole picoseconds.
    pub rep_rate: f64,
    pub drift_timescale: f64,
    pub drift: DriftModel,
    pub rng_seed: u64,
    pub waveform: PztWaveform,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            baselines: Baselines::Grid {
                start: 0.0,
                step: 10e-6,
                count: 601,
            },
            duration_per_point: 10.0,
            rep_rate: 80e6,
            drift_timescale: 10.0,
            drift: DriftModel::default(),
            rng_seed: 1,
            waveform: PztWaveform::default(),
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        let pts = self.baselines.points();
        if pts.is_empty() {
            return Err(Error::invalid("baselines", "no baselines to scan"));
        }
        if pts.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::invalid("baselines", "baselines must be finite and nonnegative"));
        }
        if pts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("baselines", "baselines must be strictly ascending"));
        }
        for (name, v) in [
            ("duration_per_point", self.duration_per_point),
            ("rep_rate", self.rep_rate),
            ("drift_timescale", self.drift_timescale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        if self.rep_rate > 1e12 {
            return Err(Error::invalid("rep_rate", "pulse period below one picosecond"));
        }
        self.waveform.validate()
    }

    pub fn pulse_period_ps(&self) -> u64 {
        (1e12 / self.rep_rate).round().max(1.0) as u64
    }

    pub fn pulses_per_point(&self) -> u64 {
        (self.duration_per_point * 1e12 / self.pulse_period_ps() as f64).floor() as u64
    }
}

/// Pulse train and sweep seen by one acquisition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timeline {
    pub pulses: u64,
    pub period_ps: u64,
    pub waveform: PztWaveform,
    /// Waveform time at acquisition start, in seconds.
    pub clock_offset: f64,
}

impl Timeline {
    pub fn time_of(&self, pulse: u64) -> f64 {
        (pulse * self.period_ps) as f64 * 1e-12
    }

    pub fn phase_of(&self, pulse: u64) -> f64 {
        self.waveform.phase_at(self.time_of(pulse) + self.clock_offset)
    }

    pub fn duration(&self) -> f64 {
        self.time_of(self.pulses)
    }
}

/// Cumulative per-pattern probabilities at phase `phi`, written to `cum`;
/// returns the total.
fn cumulative(table: &FringeTable, phi: f64, cum: &mut [f64]) -> f64 {
    let mut acc = 0.0;
    for (c, f) in cum.iter_mut().zip(&table.fringes) {
        acc += f.eval(phi).max(0.0);
        *c = acc;
    }
    acc
}

fn pick(cum: &[f64], u: f64) -> Option<usize> {
    cum.iter().position(|&c| u < c)
}

fn check_table(table: &FringeTable) -> Result<()> {
    ensure_probability("herald_probability", table.herald_probability)?;
    for f in &table.fringes {
        ensure_finite("fringe mean", f.mean)?;
        ensure_finite("fringe amplitude", f.amplitude)?;
        ensure_finite("fringe phase", f.phase)?;
    }
    Ok(())
}

/// Retained events by geometric skipping over pulses at the peak rate,
/// thinned to the actual rate at each candidate pulse.
pub fn sample_events<R: Rng>(
    table: &FringeTable,
    timeline: &Timeline,
    drift: &mut PhaseDrift,
    rng: &mut R,
) -> Result<Vec<EventRecord>> {
    check_table(table)?;
    let peak: f64 = table.fringes.iter().map(|f| f.mean + f.amplitude).sum();
    let p_max = table.herald_probability * peak;
    if p_max <= 0.0 {
        return Ok(Vec::new());
    }
    if p_max >= 1.0 {
        return Err(Error::Numerical(format!("per-pulse event probability {p_max} is not below 1")));
    }
    let log_q = (-p_max).ln_1p();
    let mut cum = vec![0.0; table.fringes.len()];
    let mut events = Vec::new();
    let mut pulse: u64 = 0;
    loop {
        let u: f64 = 1.0 - rng.gen::<f64>();
        let gap = (u.ln() / log_q).floor();
        if gap >= (timeline.pulses - pulse) as f64 {
            break;
        }
        pulse += gap as u64;
        let t = timeline.time_of(pulse);
        let phi = timeline.phase_of(pulse) + drift.at(t, rng);
        cumulative(table, phi, &mut cum);
        if let Some(k) = pick(&cum, rng.gen::<f64>() * peak) {
            events.push(EventRecord {
                time_tag_ps: pulse * timeline.period_ps,
                pattern: table.patterns[k],
                herald: true,
            });
        }
        pulse += 1;
        if pulse >= timeline.pulses {
            break;
        }
    }
    Ok(events)
}

/// Reference sampler: one Bernoulli draw per pulse.
pub fn sample_events_naive<R: Rng>(
    table: &FringeTable,
    timeline: &Timeline,
    drift: &mut PhaseDrift,
    rng: &mut R,
) -> Result<Vec<EventRecord>> {
    check_table(table)?;
    let mut cum = vec![0.0; table.fringes.len()];
    let mut events = Vec::new();
    for pulse in 0..timeline.pulses {
        let t = timeline.time_of(pulse);
        let phi = timeline.phase_of(pulse) + drift.at(t, rng);
        cumulative(table, phi, &mut cum);
        let u = rng.gen::<f64>() / table.herald_probability.max(f64::MIN_POSITIVE);
        if let Some(k) = pick(&cum, u) {
            events.push(EventRecord {
                time_tag_ps: pulse * timeline.period_ps,
                pattern: table.patterns[k],
                herald: true,
            });
        }
    }
    Ok(events)
}

/// Metadata stored with each event file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionHeader {
    pub point_index: u32,
    pub baseline: f64,
    pub seed: u64,
    pub waveform: PztWaveform,
    /// Waveform time at acquisition start, in seconds.
    pub clock_offset: f64,
    pub rep_rate: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition {
    pub header: AcquisitionHeader,
    pub events: Vec<EventRecord>,
    pub clock: ClockSignal,
    /// Mean retained-event count for this point.
    pub expected_events: f64,
}

/// Independent generator for scan point `point_index`.
pub fn point_rng(master_seed: u64, point_index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(point_index as u64);
    rng
}

/// Samples one acquisition from a precomputed fringe table.
pub fn sample_acquisition(
    table: &FringeTable,
    point_index: u32,
    baseline: f64,
    cfg: &ScanConfig,
) -> Result<Acquisition> {
    cfg.validate()?;
    let mut rng = point_rng(cfg.rng_seed, point_index);
    let clock_offset = rng.gen_range(0.0..cfg.waveform.period());
    let mut drift = PhaseDrift::new(cfg.drift, cfg.drift_timescale, &mut rng)?;
    let timeline = Timeline {
        pulses: cfg.pulses_per_point(),
        period_ps: cfg.pulse_period_ps(),
        waveform: cfg.waveform,
        clock_offset,
    };
    let events = sample_events(table, &timeline, &mut drift, &mut rng)?;
    Ok(Acquisition {
        header: AcquisitionHeader {
            point_index,
            baseline,
            seed: cfg.rng_seed,
            waveform: cfg.waveform,
            clock_offset,
            rep_rate: 1e12 / timeline.period_ps as f64,
            duration: timeline.duration(),
        },
        events,
        clock: ClockSignal::generate(&cfg.waveform, clock_offset, timeline.duration()),
        expected_events: table.expected_events(timeline.pulses as f64),
    })
}

pub fn simulate_acquisition(
    point_index: u32,
    baseline: f64,
    physics: &Physics,
    cfg: &ScanConfig,
) -> Result<Acquisition> {
    let table = physics.fringe_table(baseline)?;
    sample_acquisition(&table, point_index, baseline, cfg)
}

/// Simulates every baseline in order, handing each acquisition to `sink`.
pub fn run_scan<F>(cfg: &ScanConfig, physics: &Physics, mut sink: F) -> Result<()>
where
    F: FnMut(Acquisition) -> Result<()>,
{
    cfg.validate()?;
    for (k, b) in cfg.baselines.points().into_iter().enumerate() {
        let index = u32::try_from(k).map_err(|_| Error::invalid("baselines", "too many points"))?;
        sink(simulate_acquisition(index, b, physics, cfg)?)?;
    }
    Ok(())
}

pub const MAGIC: &[u8; 6] = b"GJCEV1";
const KIND_EVENTS: u8 = 0;
const KIND_CLOCK: u8 = 1;
const HERALD_BIT: u8 = 0x10;

fn write_header<W: Write>(w: &mut W, kind: u8, h: &AcquisitionHeader, count: u64) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u8(kind)?;
    w.write_u32::<LittleEndian>(h.point_index)?;
    w.write_f64::<LittleEndian>(h.baseline)?;
    w.write_u64::<LittleEndian>(h.seed)?;
    w.write_f64::<LittleEndian>(h.waveform.frequency)?;
    w.write_f64::<LittleEndian>(h.waveform.phase_min)?;
    w.write_f64::<LittleEndian>(h.waveform.phase_max)?;
    w.write_f64::<LittleEndian>(h.clock_offset)?;
    w.write_f64::<LittleEndian>(h.rep_rate)?;
    w.write_f64::<LittleEndian>(h.duration)?;
    w.write_u64::<LittleEndian>(count)
}

fn read_header<R: Read>(r: &mut R, kind: u8, path: &Path) -> Result<(AcquisitionHeader, u64)> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let io = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            bad("truncated header".into())
        } else {
            Error::io(path, e)
        }
    };
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("missing GJCEV1 magic".into()));
    }
    let found = r.read_u8().map_err(io)?;
    if found != kind {
        return Err(bad(format!("expected record kind {kind}, found {found}")));
    }
    let point_index = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut f = || r.read_f64::<LittleEndian>();
    let baseline = f().map_err(io)?;
    let seed = r.read_u64::<LittleEndian>().map_err(io)?;
    let mut f = || r.read_f64::<LittleEndian>();
    let waveform = PztWaveform {
        frequency: f().map_err(io)?,
        phase_min: f().map_err(io)?,
        phase_max: f().map_err(io)?,
    };
    let header = AcquisitionHeader {
        point_index,
        baseline,
        seed,
        waveform,
        clock_offset: f().map_err(io)?,
        rep_rate: f().map_err(io)?,
        duration: f().map_err(io)?,
    };
    let count = r.read_u64::<LittleEndian>().map_err(io)?;
    Ok((header, count))
}

pub fn write_events(path: &Path, header: &AcquisitionHeader, events: &[EventRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut go = || -> std::io::Result<()> {
        write_header(&mut w, KIND_EVENTS, header, events.len() as u64)?;
        for e in events {
            w.write_u64::<LittleEndian>(e.time_tag_ps)?;
            w.write_u8(e.pattern.mask() | if e.herald { HERALD_BIT } else { 0 })?;
        }
        w.flush()
    };
    go().map_err(|e| Error::io(path, e))
}

pub fn read_events(path: &Path) -> Result<(AcquisitionHeader, Vec<EventRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let (header, count) = read_header(&mut r, KIND_EVENTS, path)?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut events = Vec::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        let t = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated event records"))?;
        let flags = r.read_u8().map_err(|_| bad("truncated event records"))?;
        if flags & !(HERALD_BIT | 0x0f) != 0 {
            return Err(bad("unknown flag bits in event record"));
        }
        events.push(EventRecord {
            time_tag_ps: t,
            pattern: OutcomePattern::from_mask(flags & 0x0f)?,
            herald: flags & HERALD_BIT != 0,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing bytes after event records"));
    }
    Ok((header, events))
}

pub fn write_clock(path: &Path, header: &AcquisitionHeader, clock: &ClockSignal) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut go = || -> std::io::Result<()> {
        write_header(&mut w, KIND_CLOCK, header, clock.edges.len() as u64)?;
        for e in &clock.edges {
            w.write_f64::<LittleEndian>(e.time)?;
            w.write_u8(e.rising as u8)?;
        }
        w.flush()
    };
    go().map_err(|e| Error::io(path, e))
}

pub fn read_clock(path: &Path) -> Result<(AcquisitionHeader, ClockSignal)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let (header, count) = read_header(&mut r, KIND_CLOCK, path)?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut edges = Vec::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        let time = r.read_f64::<LittleEndian>().map_err(|_| bad("truncated clock records"))?;
        let rising = match r.read_u8().map_err(|_| bad("truncated clock records"))? {
            0 => false,
            1 => true,
            _ => return Err(bad("clock edge flag must be 0 or 1")),
        };
        edges.push(ClockEdge { time, rising });
    }
    Ok((header, ClockSignal { edges }))
}

/// File names used for scan point `k`.
pub fn point_file_names(k: u32) -> (String, String) {
    (format!("point_{k:04}.events"), format!("point_{k:04}.clock"))
}

pub fn write_acquisition(dir: &Path, acq: &Acquisition) -> Result<()> {
    let (ev, ck) = point_file_names(acq.header.point_index);
    write_events(&dir.join(ev), &acq.header, &acq.events)?;
    write_clock(&dir.join(ck), &acq.header, &acq.clock)
}

/// Photon statistics of a single field for the g² diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub enum PhotonSource {
    Thermal { mean: f64 },
    Poisson { mean: f64 },
    /// Independent thermal modes sharing `mean` according to `weights`.
    MultimodeThermal { mean: f64, weights: Vec<f64> },
}

impl PhotonSource {
    fn mode_means(&self) -> Vec<f64> {
        match self {
            PhotonSource::Thermal { mean } => vec![*mean],
            PhotonSource::Poisson { mean } => vec![*mean],
            PhotonSource::MultimodeThermal { mean, weights } => weights.iter().map(|w| w * mean).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.mode_means().iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::invalid("mean", "mode means must be finite and nonnegative"));
        }
        if let PhotonSource::MultimodeThermal { weights, .. } = self {
            let total: f64 = weights.iter().sum();
            if weights.is_empty() || (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("weights", "mode weights must sum to one"));
            }
        }
        Ok(())
    }

    /// Probability of an empty pulse in each mode.
    fn vacuum_probabilities(&self) -> Vec<f64> {
        match self {
            PhotonSource::Poisson { mean } => vec![(-mean).exp()],
            _ => self.mode_means().iter().map(|m| 1.0 / (1.0 + m)).collect(),
        }
    }

    fn sample_mode<R: Rng>(&self, mean: f64, at_least_one: bool, rng: &mut R) -> Result<u64> {
        match self {
            PhotonSource::Poisson { .. } => {
                if mean == 0.0 {
                    return Ok(0);
                }
                let dist = Poisson::new(mean).map_err(|e| Error::Numerical(e.to_string()))?;
                loop {
                    let n = dist.sample(rng) as u64;
                    if n > 0 || !at_least_one {
                        return Ok(n);
                    }
                }
            }
            _ => {
                // P(n) ∝ q^n: n = floor(ln U / ln q), shifted when n ≥ 1 is required
                let q = mean / (1.0 + mean);
                if q == 0.0 {
                    return Ok(0);
                }
                let u: f64 = 1.0 - rng.gen::<f64>();
                let n = (u.ln() / q.ln()).floor() as u64;
                Ok(if at_least_one { n + 1 } else { n })
            }
        }
    }

    /// Photon number of one pulse known to be non-empty.
    fn sample_nonempty<R: Rng>(&self, rng: &mut R) -> Result<u64> {
        let means = self.mode_means();
        let p0 = self.vacuum_probabilities();
        let all_empty: f64 = p0.iter().product();
        // pick the first occupied mode, then fill the rest unconditionally
        let mut u = rng.gen::<f64>() * (1.0 - all_empty);
        let mut before = 1.0;
        let mut first = means.len() - 1;
        for (i, &q) in p0.iter().enumerate() {
            let w = before * (1.0 - q);
            if u < w {
                first = i;
                break;
            }
            u -= w;
            before *= q;
        }
        let mut n = self.sample_mode(means[first], true, rng)?;
        for &m in &means[first + 1..] {
            n += self.sample_mode(m, false, rng)?;
        }
        Ok(n)
    }
}

/// Counts from splitting a field 50:50 onto two binary detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub pulses: u64,
    pub singles_a: u64,
    pub singles_b: u64,
    pub coincidences: u64,
}

pub fn simulate_split_counts<R: Rng>(
    source: &PhotonSource,
    pulses: u64,
    detector_efficiency: f64,
    rng: &mut R,
) -> Result<SplitCounts> {
    source.validate()?;
    ensure_probability("detector_efficiency", detector_efficiency)?;
    let p_nonempty = 1.0 - source.vacuum_probabilities().iter().product::<f64>();
    let mut counts = SplitCounts {
        pulses,
        singles_a: 0,
        singles_b: 0,
        coincidences: 0,
    };
    if p_nonempty <= 0.0 || pulses == 0 {
        return Ok(counts);
    }
    let log_q = (-p_nonempty).ln_1p();
    let mut pulse: u64 = 0;
    loop {
        let u: f64 = 1.0 - rng.gen::<f64>();
        let gap = (u.ln() / log_q).floor();
        if gap >= (pulses - pulse) as f64 {
            break;
        }
        pulse += gap as u64 + 1;
        let n = source.sample_nonempty(rng)?;
        let detected = Binomial::new(n, detector_efficiency)
            .map_err(|e| Error::Numerical(e.to_string()))?
            .sample(rng);
        let to_a = Binomial::new(detected, 0.5)
            .map_err(|e| Error::Numerical(e.to_string()))?
            .sample(rng);
        let (a, b) = (to_a > 0, detected - to_a > 0);
        counts.singles_a += a as u64;
        counts.singles_b += b as u64;
        counts.coincidences += (a && b) as u64;
        if pulse >= pulses {
            break;
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Fringe;
    use approx::assert_abs_diff_eq;

    fn toy_table(herald: f64, fringes: Vec<(OutcomePattern, Fringe)>) -> FringeTable {
        let (patterns, fringes): (Vec<_>, Vec<_>) = fringes.into_iter().unzip();
        FringeTable {
            samples: vec![Vec::new(); patterns.len()],
            patterns,
            fringes,
            herald_probability: herald,
            max_harmonic_residual: 0.0,
            overflow_population: 0.0,
        }
    }

    fn pp() -> OutcomePattern {
        OutcomePattern::new([true, false, true, false])
    }

    #[test]
    fn triangle_waveform_points() {
        let w = PztWaveform::default();
        let t = w.period();
        assert_eq!(w.phase_at(0.0), 0.0);
        assert_abs_diff_eq!(w.phase_at(t / 4.0), 2.0 * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(w.phase_at(t / 2.0), 4.0 * PI, epsilon = 1e-12);
        assert!(w.phase_at(0.6 * t) < w.phase_at(0.55 * t));
        assert_abs_diff_eq!(w.phase_at(0.3 * t), w.phase_at(0.7 * t), epsilon = 1e-12);
        assert_abs_diff_eq!(w.phase_at(1234.0 * t + 0.1 * t), w.phase_at(0.1 * t), epsilon = 1e-8);
        assert!(PztWaveform {
            phase_max: -1.0,
            ..w
        }
        .validate()
        .is_err());
    }

    #[test]
    fn clock_edges_alternate_at_half_periods() {
        let w = PztWaveform::default();
        let offset = 0.3 * w.period();
        let clock = ClockSignal::generate(&w, offset, 0.1);
        let (lo, hi) = clock.span().unwrap();
        assert!(lo <= 0.0 && hi >= 0.1);
        for pair in clock.edges.windows(2) {
            assert_abs_diff_eq!(pair[1].time - pair[0].time, 0.5 * w.period(), epsilon = 1e-12);
            assert_ne!(pair[0].rising, pair[1].rising);
        }
        for e in &clock.edges {
            let expected = if e.rising { w.phase_min } else { w.phase_max };
            assert_abs_diff_eq!(w.phase_at(e.time + offset), expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn drift_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut none = PhaseDrift::new(DriftModel::None, 10.0, &mut rng).unwrap();
        assert_eq!(none.at(5.0, &mut rng), 0.0);
        let mut constant = PhaseDrift::new(DriftModel::Constant, 10.0, &mut rng).unwrap();
        let c0 = constant.at(0.0, &mut rng);
        assert_eq!(constant.at(9.0, &mut rng), c0);
        assert!(PhaseDrift::new(DriftModel::None, 0.0, &mut rng).is_err());
    }

    #[test]
    fn ou_increment_over_timescale_is_two_pi() {
        let tau = 10.0;
        let mut sq = 0.0;
        let seeds = 100;
        for s in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut d = PhaseDrift::new(DriftModel::OrnsteinUhlenbeck, tau, &mut rng).unwrap();
            let a = d.at(0.0, &mut rng);
            // many small steps must compose to the same law as one jump
            let mut b = a;
            for k in 1..=100 {
                b = d.at(k as f64 * tau / 100.0, &mut rng);
            }
            sq += (b - a).powi(2);
        }
        let rms = (sq / seeds as f64).sqrt();
        assert!((rms - 2.0 * PI).abs() < 0.2 * 2.0 * PI, "{rms}");
    }

    #[test]
    fn time_tags_are_increasing_pulse_multiples() {
        let table = toy_table(
            0.01,
            vec![(
                pp(),
                Fringe {
                    mean: 0.1,
                    amplitude: 0.05,
                    phase: 0.3,
                },
            )],
        );
        let cfg = ScanConfig {
            duration_per_point: 0.01,
            ..ScanConfig::default()
        };
        let acq = sample_acquisition(&table, 0, 0.0, &cfg).unwrap();
        assert!(!acq.events.is_empty());
        assert!(acq.events.windows(2).all(|w| w[1].time_tag_ps > w[0].time_tag_ps));
        assert!(acq.events.iter().all(|e| e.time_tag_ps % 12_500 == 0 && e.herald));
        let n = acq.events.len() as f64;
        assert!((n - acq.expected_events).abs() < 4.0 * acq.expected_events.sqrt());
    }

    #[test]
    fn dark_source_gives_no_events() {
        let table = toy_table(
            0.0,
            vec![(
                pp(),
                Fringe {
                    mean: 0.1,
                    amplitude: 0.0,
                    phase: 0.0,
                },
            )],
        );
        let acq = sample_acquisition(&table, 2, 0.0, &ScanConfig::default()).unwrap();
        assert!(acq.events.is_empty());
        let zero = Physics {
            mean_star: 0.0,
            spdc: crate::optics::SpdcModel {
                mean_photons: 0.0,
                ..Default::default()
            },
            ..Physics::default()
        };
        let acq = simulate_acquisition(0, 0.0, &zero, &ScanConfig::default()).unwrap();
        assert!(acq.events.is_empty());
    }

    #[test]
    fn same_seed_same_acquisition() {
        let table = toy_table(
            0.02,
            vec![(
                pp(),
                Fringe {
                    mean: 0.1,
                    amplitude: 0.05,
                    phase: 0.0,
                },
            )],
        );
        let cfg = ScanConfig {
            duration_per_point: 0.005,
            drift: DriftModel::OrnsteinUhlenbeck,
            ..ScanConfig::default()
        };
        let a = sample_acquisition(&table, 4, 1e-3, &cfg).unwrap();
        let b = sample_acquisition(&table, 4, 1e-3, &cfg).unwrap();
        assert_eq!(a, b);
        let c = sample_acquisition(&table, 5, 1e-3, &cfg).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn default_scan_parameters() {
        let cfg = ScanConfig::default();
        let pts = cfg.baselines.points();
        assert_eq!(pts.len(), 601);
        assert_abs_diff_eq!(pts[600], 6e-3, epsilon = 1e-12);
        assert_eq!(cfg.pulse_period_ps(), 12_500);
        assert_eq!(cfg.pulses_per_point(), 800_000_000);
        let unsorted = ScanConfig {
            baselines: Baselines::List(vec![0.0, 2e-3, 1e-3]),
            ..ScanConfig::default()
        };
        assert!(unsorted.validate().is_err());
    }

    #[test]
    fn event_and_clock_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let table = toy_table(
            0.02,
            vec![(
                OutcomePattern::new([false, true, true, true]),
                Fringe {
                    mean: 0.1,
                    amplitude: 0.05,
                    phase: 0.0,
                },
            )],
        );
        let cfg = ScanConfig {
            duration_per_point: 0.002,
            ..ScanConfig::default()
        };
        let acq = sample_acquisition(&table, 7, 0.25e-3, &cfg).unwrap();
        write_acquisition(dir.path(), &acq).unwrap();
        let (ev, ck) = point_file_names(7);
        let (h, events) = read_events(&dir.path().join(&ev)).unwrap();
        assert_eq!(h, acq.header);
        assert_eq!(events, acq.events);
        let (h2, clock) = read_clock(&dir.path().join(&ck)).unwrap();
        assert_eq!(h2, acq.header);
        assert_eq!(clock, acq.clock);
        // wrong kind, bad magic, truncation
        assert!(matches!(read_events(&dir.path().join(&ck)), Err(Error::Format { .. })));
        let bytes = std::fs::read(dir.path().join(&ev)).unwrap();
        let broken = dir.path().join("broken.events");
        std::fs::write(&broken, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_events(&broken), Err(Error::Format { .. })));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        std::fs::write(&broken, &wrong).unwrap();
        assert!(matches!(read_events(&broken), Err(Error::Format { .. })));
        assert!(matches!(read_events(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn split_counts_follow_source_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pulses = 20_000_000;
        let poisson = simulate_split_counts(&PhotonSource::Poisson { mean: 0.02 }, pulses, 1.0, &mut rng).unwrap();
        let g2 = poisson.coincidences as f64 * pulses as f64 / (poisson.singles_a as f64 * poisson.singles_b as f64);
        assert!((g2 - 1.0).abs() < 0.1, "{g2}");
        // P(click A) = 1 − e^{−n̄/2}
        let pa = poisson.singles_a as f64 / pulses as f64;
        assert!((pa - (1.0 - (-0.01f64).exp())).abs() < 5e-5);
        let thermal = simulate_split_counts(&PhotonSource::Thermal { mean: 0.02 }, pulses, 0.5, &mut rng).unwrap();
        // P(no click A) = 1/(1 + η n̄/2)
        let pa = thermal.singles_a as f64 / pulses as f64;
        assert!((pa - (1.0 - 1.0 / 1.005)).abs() < 5e-5, "{pa}");
        let empty = simulate_split_counts(&PhotonSource::Thermal { mean: 0.0 }, 1000, 1.0, &mut rng).unwrap();
        assert_eq!(empty.singles_a + empty.singles_b, 0);
    }
}
