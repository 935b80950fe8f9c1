//! Measurement records consumed by identification.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CellState;
use crate::simulator::{Ambient, CurrentProfile, Interpolation, SimulationTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Capacity used for C-rate classification and Coulomb counting, in Ah.
    pub capacity_ah: f64,
    /// Ambient temperature during the experiment, in kelvin.
    pub t_amb: f64,
    /// State of charge at the first sample; the cell is assumed rested.
    pub soc0: f64,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        Self {
            capacity_ah: 2.5,
            t_amb: 298.15,
            soc0: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub time: Vec<f64>,
    pub current: Vec<f64>,
    pub voltage: Vec<f64>,
    pub temp_surf: Option<Vec<f64>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(
        time: Vec<f64>,
        current: Vec<f64>,
        voltage: Vec<f64>,
        temp_surf: Option<Vec<f64>>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let d = Self {
            time,
            current,
            voltage,
            temp_surf,
            meta,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn from_trace(trace: &SimulationTrace, meta: DatasetMeta) -> Result<Self> {
        Self::new(
            trace.rows.iter().map(|r| r.time).collect(),
            trace.rows.iter().map(|r| r.current).collect(),
            trace.rows.iter().map(|r| r.terminal_voltage).collect(),
            Some(trace.rows.iter().map(|r| r.state.t_surf).collect()),
            meta,
        )
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.time.len();
        if n < 2 {
            return Err(Error::InvalidProfile("dataset needs at least two samples".into()));
        }
        for len in [self.current.len(), self.voltage.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        if let Some(t) = &self.temp_surf {
            if t.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: t.len(),
                });
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidProfile("non-finite temperature sample".into()));
            }
        }
        for k in 0..n {
            if !self.time[k].is_finite() || (k > 0 && self.time[k] <= self.time[k - 1]) {
                return Err(Error::InvalidProfile(format!(
                    "dataset times must be strictly increasing (row {k})"
                )));
            }
            if !(self.current[k].is_finite() && self.voltage[k].is_finite()) {
                return Err(Error::InvalidProfile(format!(
                    "non-finite current or voltage at row {k}"
                )));
            }
        }
        let m = &self.meta;
        if !(m.capacity_ah.is_finite() && m.capacity_ah > 0.0) {
            return Err(Error::InvalidProfile(format!(
                "capacity {} Ah must be positive",
                m.capacity_ah
            )));
        }
        if !(m.t_amb.is_finite() && m.t_amb > 0.0) {
            return Err(Error::InvalidProfile(format!("ambient {} K must be positive", m.t_amb)));
        }
        if !(0.0..=1.0).contains(&m.soc0) {
            return Err(Error::InvalidProfile(format!("soc0 {} outside [0, 1]", m.soc0)));
        }
        Ok(())
    }

    /// Current divided by the 1 C current.
    pub fn c_rate(&self, k: usize) -> f64 {
        self.current[k] / self.meta.capacity_ah
    }

    /// The applied current as a hold-previous profile starting at zero.
    pub fn profile(&self) -> Result<CurrentProfile> {
        let t0 = self.time[0];
        let samples = self.time.iter().zip(&self.current).map(|(t, i)| (t - t0, *i)).collect();
        CurrentProfile::new(samples, Interpolation::HoldPrevious, Ambient::Constant(self.meta.t_amb))
    }

    /// Sample times relative to the first sample.
    pub fn relative_times(&self) -> Vec<f64> {
        let t0 = self.time[0];
        self.time.iter().map(|t| t - t0).collect()
    }

    /// The rested equilibrium state the experiment starts from.
    pub fn initial_state(&self, n_solid_nodes: usize) -> CellState {
        CellState::equilibrium(n_solid_nodes, self.meta.soc0, self.meta.t_amb)
    }

    /// Net charge passed, in coulombs, integrating each sample's current
    /// over the following interval.
    pub fn net_charge(&self) -> f64 {
        self.time
            .windows(2)
            .zip(&self.current)
            .map(|(w, i)| i * (w[1] - w[0]))
            .sum()
    }

    /// Capacity in Ah implied by a full charge or discharge.
    pub fn measured_capacity_ah(&self) -> f64 {
        self.net_charge().abs() / 3600.0
    }
}

/// Gaussian noise on the voltage and surface-temperature channels of a
/// simulated trace. The current channel is left untouched.
pub fn add_noise(
    trace: &SimulationTrace,
    meta: DatasetMeta,
    voltage_sigma: f64,
    temp_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    let clean = Dataset::from_trace(trace, meta)?;
    perturb(&clean, voltage_sigma, temp_sigma, seed)
}

/// Like [`add_noise`] for an existing dataset.
pub fn perturb(data: &Dataset, voltage_sigma: f64, temp_sigma: f64, seed: u64) -> Result<Dataset> {
    for (name, s) in [("voltage_sigma", voltage_sigma), ("temp_sigma", temp_sigma)] {
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::domain("add_noise", format!("{name} = {s} must be >= 0")));
        }
    }
    let mut out = data.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    if voltage_sigma > 0.0 {
        for v in &mut out.voltage {
            *v += voltage_sigma * unit.sample(&mut rng);
        }
    }
    if temp_sigma > 0.0 {
        if let Some(t) = &mut out.temp_surf {
            for v in t.iter_mut() {
                *v += temp_sigma * unit.sample(&mut rng);
            }
        }
    }
    Ok(out)
}
