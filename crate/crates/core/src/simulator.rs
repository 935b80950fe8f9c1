//! Fixed-step integration of the coupled cell model over current profiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CellState, Kernel, ModelParams};

/// Tolerated excursion of normalized node voltages outside `[0, 1]`.
pub const BOUNDS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Each sample's current holds until the next sample (right-continuous).
    HoldPrevious,
    Linear,
}

/// Ambient temperature in kelvin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ambient {
    Constant(f64),
    /// `(time, kelvin)` points, linearly interpolated and held at the ends.
    Series(Vec<(f64, f64)>),
}

impl Ambient {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Ambient::Constant(v) => *v,
            Ambient::Series(pts) => interpolate_linear(pts, t),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        match self {
            Ambient::Constant(v) if ok(*v) => Ok(()),
            Ambient::Constant(v) => Err(Error::InvalidProfile(format!("ambient {v} K must be positive"))),
            Ambient::Series(pts) => {
                if pts.is_empty() {
                    return Err(Error::InvalidProfile("empty ambient series".into()));
                }
                check_increasing(pts.iter().map(|p| p.0), "ambient")?;
                match pts.iter().find(|p| !ok(p.1)) {
                    Some(p) => Err(Error::InvalidProfile(format!("ambient {} K must be positive", p.1))),
                    None => Ok(()),
                }
            }
        }
    }
}

fn check_increasing(times: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for (k, t) in times.enumerate() {
        if !t.is_finite() || t <= prev {
            return Err(Error::InvalidProfile(format!(
                "{what} times must be finite and strictly increasing (sample {k}: {t})"
            )));
        }
        prev = t;
    }
    Ok(())
}

fn interpolate_linear(pts: &[(f64, f64)], t: f64) -> f64 {
    let k = pts.partition_point(|p| p.0 <= t);
    if k == 0 {
        return pts[0].1;
    }
    if k == pts.len() {
        return pts[k - 1].1;
    }
    let (t0, v0) = pts[k - 1];
    let (t1, v1) = pts[k];
    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
}

/// A piecewise current schedule in amperes (positive charges the cell).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentProfile {
    samples: Vec<(f64, f64)>,
    interpolation: Interpolation,
    ambient: Ambient,
}

impl CurrentProfile {
    pub fn new(samples: Vec<(f64, f64)>, interpolation: Interpolation, ambient: Ambient) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidProfile("profile has no samples".into()));
        }
        if samples[0].0 != 0.0 {
            return Err(Error::InvalidProfile(format!(
                "profile must start at t = 0, got {}",
                samples[0].0
            )));
        }
        check_increasing(samples.iter().map(|s| s.0), "profile")?;
        if let Some((t, i)) = samples.iter().find(|s| !s.1.is_finite()) {
            return Err(Error::InvalidProfile(format!("non-finite current {i} at t = {t}")));
        }
        ambient.validate()?;
        Ok(Self {
            samples,
            interpolation,
            ambient,
        })
    }

    /// A single constant-current segment.
    pub fn constant(current: f64, duration: f64, t_amb: f64) -> Result<Self> {
        if !(duration > 0.0) {
            return Err(Error::InvalidProfile(format!("duration {duration} must be positive")));
        }
        Self::new(
            vec![(0.0, current), (duration, current)],
            Interpolation::HoldPrevious,
            Ambient::Constant(t_amb),
        )
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn ambient(&self) -> &Ambient {
        &self.ambient
    }

    pub fn duration(&self) -> f64 {
        self.samples[self.samples.len() - 1].0
    }

    pub fn with_ambient(mut self, ambient: Ambient) -> Result<Self> {
        ambient.validate()?;
        self.ambient = ambient;
        Ok(self)
    }

    /// Right-continuous current at `t`.
    pub fn current_at(&self, t: f64) -> f64 {
        match self.interpolation {
            Interpolation::HoldPrevious => {
                let k = self.samples.partition_point(|s| s.0 <= t);
                self.samples[k.saturating_sub(1)].1
            }
            Interpolation::Linear => interpolate_linear(&self.samples, t),
        }
    }

    /// Appends `other`, shifted to start where `self` ends. A sample of
    /// `other` at its own time zero replaces the final sample of `self`.
    pub fn concat(&self, other: &CurrentProfile) -> Result<Self> {
        if self.interpolation != other.interpolation {
            return Err(Error::InvalidProfile(
                "cannot join profiles with different interpolation".into(),
            ));
        }
        let offset = self.duration();
        let mut samples = self.samples.clone();
        samples.pop();
        if samples.is_empty() && offset > 0.0 {
            samples.push(self.samples[0]);
        }
        samples.extend(other.samples.iter().map(|&(t, i)| (t + offset, i)));
        let ambient = match (&self.ambient, &other.ambient) {
            (Ambient::Constant(a), Ambient::Constant(b)) if a == b => Ambient::Constant(*a),
            (a, b) => {
                let mut pts = ambient_points(a, 0.0, offset);
                let tail = ambient_points(b, 0.0, other.duration());
                pts.extend(tail.into_iter().map(|(t, v)| (t + offset, v)).filter(|p| p.0 > offset));
                Ambient::Series(pts)
            }
        };
        Self::new(samples, self.interpolation, ambient)
    }

    /// Times where the current or its slope may change, excluding zero.
    fn breakpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().skip(1).map(|s| s.0)
    }

    /// Current on the open interval `(a, b)`, which contains no breakpoint,
    /// evaluated at `t` in `[a, b]`.
    fn current_within(&self, a: f64, b: f64, t: f64) -> f64 {
        match self.interpolation {
            Interpolation::HoldPrevious => self.current_at(0.5 * (a + b)),
            Interpolation::Linear => interpolate_linear(&self.samples, t),
        }
    }
}

fn ambient_points(a: &Ambient, start: f64, end: f64) -> Vec<(f64, f64)> {
    match a {
        Ambient::Constant(v) => vec![(start, *v), (end.max(start + f64::EPSILON), *v)],
        Ambient::Series(p) => {
            let mut out: Vec<(f64, f64)> = vec![(start, a.at(start))];
            out.extend(p.iter().copied().filter(|q| q.0 > start && q.0 < end));
            if end > start {
                out.push((end, a.at(end)));
            }
            out
        }
    }
}

/// Equilibrium state at `soc0` and ambient temperature.
pub fn initial_state_from_soc(soc0: f64, t_amb: f64, params: &ModelParams) -> Result<CellState> {
    if !(0.0..=1.0).contains(&soc0) {
        return Err(Error::domain(
            "initial_state_from_soc",
            format!("soc0 = {soc0} outside [0, 1]"),
        ));
    }
    Ok(CellState::equilibrium(params.n_solid_nodes, soc0, t_amb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialCondition {
    Soc(f64),
    State(CellState),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Integration step in seconds.
    pub step: f64,
    /// Spacing of trace rows in seconds.
    pub output_interval: f64,
    pub initial: InitialCondition,
    /// Terminate when a node voltage leaves `[0, 1]` by more than
    /// [`BOUNDS_TOLERANCE`]. When off, excursions are counted and OCV
    /// arguments are clamped.
    pub strict_bounds: bool,
    /// Stop at the voltage cutoffs.
    pub cutoffs: bool,
    /// Also emit a row one step before every profile breakpoint, so that
    /// voltage jumps at current steps are visible in the trace.
    pub breakpoint_rows: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            step: 0.1,
            output_interval: 1.0,
            initial: InitialCondition::Soc(1.0),
            strict_bounds: true,
            cutoffs: true,
            breakpoint_rows: false,
        }
    }
}

impl SimOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::InvalidOptions(format!("step {} must be positive", self.step)));
        }
        if !(self.output_interval.is_finite() && self.output_interval >= self.step) {
            return Err(Error::InvalidOptions(format!(
                "output interval {} must be finite and >= step {}",
                self.output_interval, self.step
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    ProfileEnd,
    LowCutoff,
    HighCutoff,
    BoundsViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub time: f64,
    /// Current applied from this instant on (right limit at breakpoints).
    pub current: f64,
    pub terminal_voltage: f64,
    pub soc: f64,
    pub heat_rate: f64,
    /// Net charge passed since the start, in coulombs.
    pub charge: f64,
    pub state: CellState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub rows: Vec<TraceRow>,
    pub termination: Termination,
    /// Integration steps that ended with a node voltage outside `[0, 1]`
    /// (only non-zero without strict bounds).
    pub bounds_excursions: usize,
}

impl SimulationTrace {
    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("trace has at least one row")
    }

    pub fn duration(&self) -> f64 {
        self.last().time - self.rows[0].time
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.time).collect()
    }

    pub fn voltages(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.terminal_voltage).collect()
    }

    pub fn surface_temperatures(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.state.t_surf).collect()
    }
}

fn component_name(k: usize, n: usize) -> String {
    if k < n {
        format!("v_s[{k}]")
    } else if k < n + 3 {
        format!("v_e[{}]", k - n)
    } else if k == n + 3 {
        "t_core".into()
    } else {
        "t_surf".into()
    }
}

struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }
}

fn check_finite(k: &[f64], n: usize) -> Result<()> {
    match k.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            component: component_name(i, n),
        }),
        None => Ok(()),
    }
}

/// One classical RK4 step on the packed state. `currents` and `ambients`
/// hold values at the start, midpoint and end of the step.
fn rk4_packed(
    kernel: &Kernel,
    x: &mut [f64],
    currents: [f64; 3],
    ambients: [f64; 3],
    h: f64,
    s: &mut Rk4Scratch,
) -> Result<()> {
    let n = kernel.n;
    kernel.rhs(x, currents[0], ambients[0], &mut s.k1);
    check_finite(&s.k1, n)?;
    for i in 0..x.len() {
        s.tmp[i] = x[i] + 0.5 * h * s.k1[i];
    }
    kernel.rhs(&s.tmp, currents[1], ambients[1], &mut s.k2);
    check_finite(&s.k2, n)?;
    for i in 0..x.len() {
        s.tmp[i] = x[i] + 0.5 * h * s.k2[i];
    }
    kernel.rhs(&s.tmp, currents[1], ambients[1], &mut s.k3);
    check_finite(&s.k3, n)?;
    for i in 0..x.len() {
        s.tmp[i] = x[i] + h * s.k3[i];
    }
    kernel.rhs(&s.tmp, currents[2], ambients[2], &mut s.k4);
    check_finite(&s.k4, n)?;
    for i in 0..x.len() {
        x[i] += h / 6.0 * (s.k1[i] + 2.0 * (s.k2[i] + s.k3[i]) + s.k4[i]);
    }
    check_finite(x, n)
}

/// One RK4 step of length `dt` at constant current and ambient.
pub fn step_rk4(state: &CellState, current: f64, t_amb: f64, dt: f64, params: &ModelParams) -> Result<CellState> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::domain("step_rk4", format!("dt = {dt} must be positive")));
    }
    params.validate()?;
    if state.v_s.len() != params.n_solid_nodes {
        return Err(Error::DimensionMismatch {
            expected: params.n_solid_nodes,
            actual: state.v_s.len(),
        });
    }
    let kernel = Kernel::new(params);
    let mut x = Vec::with_capacity(kernel.dim());
    state.pack(&mut x);
    let mut scratch = Rk4Scratch::new(kernel.dim());
    rk4_packed(&kernel, &mut x, [current; 3], [t_amb; 3], dt, &mut scratch)?;
    Ok(CellState::unpack(&x))
}

/// Integrates `profile` and records rows every `options.output_interval`
/// seconds, stopping at the voltage cutoffs when enabled.
pub fn simulate(profile: &CurrentProfile, params: &ModelParams, options: &SimOptions) -> Result<SimulationTrace> {
    options.validate()?;
    let end = profile.duration();
    let dt = options.output_interval;
    let count = (end / dt + 1e-9).floor() as usize;
    let mut times: Vec<f64> = (0..=count).map(|k| k as f64 * dt).collect();
    if end - times[times.len() - 1] > 1e-9 * dt.max(1.0) {
        times.push(end);
    } else {
        *times.last_mut().expect("non-empty") = end.max(times[times.len() - 1]);
    }
    if options.breakpoint_rows {
        let extra: Vec<f64> = profile
            .breakpoints()
            .map(|b| b - options.step)
            .filter(|&t| t > 0.0)
            .collect();
        times.extend(extra);
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        times.dedup_by(|a, b| (*a - *b).abs() <= 1e-9);
    }
    run(profile, params, options, &times)
}

/// Integrates `profile` and records rows exactly at `times`, without
/// cutoffs and with lenient bounds. Used to replay measured experiments.
pub fn simulate_at(
    profile: &CurrentProfile,
    params: &ModelParams,
    initial: &CellState,
    times: &[f64],
    step: f64,
) -> Result<SimulationTrace> {
    if times.is_empty() {
        return Err(Error::InvalidOptions("no output times".into()));
    }
    if times[0] < 0.0 {
        return Err(Error::InvalidOptions("output times must be non-negative".into()));
    }
    check_increasing(times.iter().copied(), "output").map_err(|e| Error::InvalidOptions(e.to_string()))?;
    let options = SimOptions {
        step,
        output_interval: step,
        initial: InitialCondition::State(initial.clone()),
        strict_bounds: false,
        cutoffs: false,
        breakpoint_rows: false,
    };
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidOptions(format!("step {step} must be positive")));
    }
    run(profile, params, &options, times)
}

struct Engine<'a> {
    kernel: Kernel<'a>,
    params: &'a ModelParams,
    options: &'a SimOptions,
}

impl Engine<'_> {
    fn row(&self, t: f64, x: &[f64], current: f64, charge: f64) -> Result<TraceRow> {
        let voltage = self.kernel.voltage(x, current).ok_or_else(|| Error::NonFinite {
            component: "terminal_voltage".into(),
        })?;
        Ok(TraceRow {
            time: t,
            current,
            terminal_voltage: voltage,
            soc: self.kernel.soc(x),
            heat_rate: self.kernel.heat(x, current),
            charge,
            state: CellState::unpack(x),
        })
    }

    fn cutoff(&self, v: f64) -> Option<(Termination, f64)> {
        if !self.options.cutoffs {
            return None;
        }
        if v < self.params.v_cut_low {
            Some((Termination::LowCutoff, self.params.v_cut_low))
        } else if v > self.params.v_cut_high {
            Some((Termination::HighCutoff, self.params.v_cut_high))
        } else {
            None
        }
    }

    fn out_of_bounds(&self, x: &[f64]) -> bool {
        x[..self.kernel.n + 3]
            .iter()
            .any(|&v| v < -BOUNDS_TOLERANCE || v > 1.0 + BOUNDS_TOLERANCE)
    }
}

fn lerp_row(a: &TraceRow, b: &TraceRow, f: f64) -> TraceRow {
    let l = |p: f64, q: f64| p + f * (q - p);
    let mut state = a.state.clone();
    for (s, q) in state.v_s.iter_mut().zip(&b.state.v_s) {
        *s = l(*s, *q);
    }
    for (s, q) in state.v_e.iter_mut().zip(&b.state.v_e) {
        *s = l(*s, *q);
    }
    state.t_core = l(a.state.t_core, b.state.t_core);
    state.t_surf = l(a.state.t_surf, b.state.t_surf);
    TraceRow {
        time: l(a.time, b.time),
        current: l(a.current, b.current),
        terminal_voltage: l(a.terminal_voltage, b.terminal_voltage),
        soc: l(a.soc, b.soc),
        heat_rate: l(a.heat_rate, b.heat_rate),
        charge: l(a.charge, b.charge),
        state,
    }
}

fn run(profile: &CurrentProfile, params: &ModelParams, options: &SimOptions, times: &[f64]) -> Result<SimulationTrace> {
    params.validate()?;
    let initial = match &options.initial {
        InitialCondition::Soc(s) => initial_state_from_soc(*s, profile.ambient.at(0.0), params)?,
        InitialCondition::State(s) => s.clone(),
    };
    if options.strict_bounds {
        initial.validate(params.n_solid_nodes)?;
    } else if initial.v_s.len() != params.n_solid_nodes {
        return Err(Error::DimensionMismatch {
            expected: params.n_solid_nodes,
            actual: initial.v_s.len(),
        });
    }
    let engine = Engine {
        kernel: Kernel::new(params),
        params,
        options,
    };
    let end = profile.duration().min(times[times.len() - 1]);

    // Event grid: output times and breakpoints up to `end`.
    let mut events: Vec<(f64, bool)> = times.iter().filter(|&&t| t <= end).map(|&t| (t, true)).collect();
    events.extend(profile.breakpoints().filter(|&b| b < end).map(|b| (b, false)));
    events.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
    let mut grid: Vec<(f64, bool)> = Vec::with_capacity(events.len());
    for (t, out) in events {
        match grid.last_mut() {
            Some(last) if last.0 == t => last.1 |= out,
            _ => grid.push((t, out)),
        }
    }

    let mut x = Vec::with_capacity(engine.kernel.dim());
    initial.pack(&mut x);
    let mut scratch = Rk4Scratch::new(x.len());
    let mut rows = Vec::with_capacity(times.len());
    let mut excursions = 0usize;
    let mut t = 0.0;
    let mut charge = 0.0;

    let first = engine.row(0.0, &x, profile.current_at(0.0), 0.0)?;
    let first_check = engine.cutoff(first.terminal_voltage);
    let emit_first = grid.first().is_some_and(|g| g.0 == 0.0 && g.1);
    if emit_first || first_check.is_some() {
        rows.push(first.clone());
    }
    if let Some((cause, _)) = first_check {
        return Ok(SimulationTrace {
            rows,
            termination: cause,
            bounds_excursions: 0,
        });
    }
    let mut prev = first;

    for &(target, is_output) in grid.iter().filter(|g| g.0 > 0.0) {
        let span = target - t;
        let nsub = ((span / options.step) - 1e-9).ceil().max(1.0) as usize;
        let h = span / nsub as f64;
        for k in 0..nsub {
            let a = t + k as f64 * h;
            let b = if k + 1 == nsub { target } else { t + (k + 1) as f64 * h };
            let m = 0.5 * (a + b);
            let seg = (t, target);
            let currents = [
                profile.current_within(seg.0, seg.1, a),
                profile.current_within(seg.0, seg.1, m),
                profile.current_within(seg.0, seg.1, b),
            ];
            let amb = &profile.ambient;
            rk4_packed(
                &engine.kernel,
                &mut x,
                currents,
                [amb.at(a), amb.at(m), amb.at(b)],
                b - a,
                &mut scratch,
            )?;
            charge += (b - a) * (currents[0] + 4.0 * currents[1] + currents[2]) / 6.0;

            let violated = engine.out_of_bounds(&x);
            if violated {
                if options.strict_bounds {
                    rows.push(engine.row(b, &x, currents[2], charge)?);
                    return Ok(SimulationTrace {
                        rows,
                        termination: Termination::BoundsViolation,
                        bounds_excursions: excursions + 1,
                    });
                }
                excursions += 1;
            }

            // Left-limit check at the end of the step.
            let left = engine.row(b, &x, currents[2], charge)?;
            if let Some((cause, limit)) = engine.cutoff(left.terminal_voltage) {
                let dv = left.terminal_voltage - prev.terminal_voltage;
                let f = if dv != 0.0 {
                    ((limit - prev.terminal_voltage) / dv).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                let crossing = lerp_row(&prev, &left, f);
                if rows.last().is_some_and(|r: &TraceRow| r.time >= crossing.time) {
                    rows.pop();
                }
                rows.push(crossing);
                return Ok(SimulationTrace {
                    rows,
                    termination: cause,
                    bounds_excursions: excursions,
                });
            }
            prev = left;
        }
        t = target;

        // Right limit at the grid point: the current may jump here.
        let right_current = profile.current_at(t);
        let row = if right_current != prev.current {
            engine.row(t, &x, right_current, charge)?
        } else {
            prev.clone()
        };
        let jump = engine.cutoff(row.terminal_voltage);
        if is_output || jump.is_some() {
            rows.push(row.clone());
        }
        if let Some((cause, _)) = jump {
            return Ok(SimulationTrace {
                rows,
                termination: cause,
                bounds_excursions: excursions,
            });
        }
        prev = row;
    }

    Ok(SimulationTrace {
        rows,
        termination: Termination::ProfileEnd,
        bounds_excursions: excursions,
    })
}

/// Discharge rate `c_rate` (per hour, of `capacity_ah`) as a signed current.
pub fn discharge_current(c_rate: f64, capacity_ah: f64) -> f64 {
    -c_rate * capacity_ah
}
