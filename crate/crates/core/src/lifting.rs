//! Observable dictionaries: the lifting map `z = Φ(x)`, its Jacobian, and the
//! selector output matrix.
//!
//! Every dictionary starts with the raw state coordinates, so the lifted
//! output map for coordinate measurements is an exact 0/1 selector and a
//! state estimate is a row selection of the lifted estimate.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trig {
    Sin,
    Cos,
}

/// One observable of the dictionary, evaluated analytically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisEntry {
    Identity { index: usize },
    /// `Π x_i^{powers[i]}`, total degree at least one.
    Monomial { powers: Vec<u32> },
    Sine { index: usize, frequency: f64 },
    Cosine { index: usize, frequency: f64 },
    /// `cos(wᵀx + phase)`
    FourierFeature { weights: Vec<f64>, phase: f64 },
    /// `x_{power_index}^power · trig(frequency · x_{trig_index})`
    TrigMonomial {
        power_index: usize,
        power: u32,
        trig_index: usize,
        frequency: f64,
        trig: Trig,
    },
    /// `tanh(scale · x_index)`
    Tanh { index: usize, scale: f64 },
}

impl BasisEntry {
    fn validate(&self, n: usize) -> Result<()> {
        let check_index = |index: usize| {
            if index < n {
                Ok(())
            } else {
                Err(Error::IndexOutOfRange { index, dim: n })
            }
        };
        let check_finite = |v: f64, what: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidEntry(format!("{what} must be finite")))
            }
        };
        match self {
            BasisEntry::Identity { index } => check_index(*index),
            BasisEntry::Monomial { powers } => {
                if powers.len() != n {
                    return Err(Error::InvalidEntry(format!(
                        "monomial has {} exponents for a {n}-dimensional state",
                        powers.len()
                    )));
                }
                if powers.iter().sum::<u32>() == 0 {
                    return Err(Error::InvalidEntry(
                        "constant monomials are not allowed".into(),
                    ));
                }
                Ok(())
            }
            BasisEntry::Sine { index, frequency } | BasisEntry::Cosine { index, frequency } => {
                check_index(*index)?;
                check_finite(*frequency, "frequency")
            }
            BasisEntry::FourierFeature { weights, phase } => {
                if weights.len() != n {
                    return Err(Error::InvalidEntry(format!(
                        "fourier feature has {} weights for a {n}-dimensional state",
                        weights.len()
                    )));
                }
                for w in weights {
                    check_finite(*w, "weight")?;
                }
                check_finite(*phase, "phase")
            }
            BasisEntry::TrigMonomial {
                power_index,
                trig_index,
                frequency,
                ..
            } => {
                check_index(*power_index)?;
                check_index(*trig_index)?;
                check_finite(*frequency, "frequency")
            }
            BasisEntry::Tanh { index, scale } => {
                check_index(*index)?;
                check_finite(*scale, "scale")
            }
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            BasisEntry::Identity { index } => x[*index],
            BasisEntry::Monomial { powers } => powers
                .iter()
                .zip(x)
                .map(|(&k, &xi)| xi.powi(k as i32))
                .product(),
            BasisEntry::Sine { index, frequency } => (frequency * x[*index]).sin(),
            BasisEntry::Cosine { index, frequency } => (frequency * x[*index]).cos(),
            BasisEntry::FourierFeature { weights, phase } => {
                (dot(weights, x) + phase).cos()
            }
            BasisEntry::TrigMonomial {
                power_index,
                power,
                trig_index,
                frequency,
                trig,
            } => x[*power_index].powi(*power as i32) * trig_eval(*trig, frequency * x[*trig_index]),
            BasisEntry::Tanh { index, scale } => (scale * x[*index]).tanh(),
        }
    }

    /// Writes the gradient of the entry into `out` (length n).
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match self {
            BasisEntry::Identity { index } => out[*index] = 1.0,
            BasisEntry::Monomial { powers } => {
                for (j, &kj) in powers.iter().enumerate() {
                    if kj == 0 {
                        continue;
                    }
                    let mut g = kj as f64 * x[j].powi(kj as i32 - 1);
                    for (i, (&ki, &xi)) in powers.iter().zip(x).enumerate() {
                        if i != j {
                            g *= xi.powi(ki as i32);
                        }
                    }
                    out[j] = g;
                }
            }
            BasisEntry::Sine { index, frequency } => {
                out[*index] = frequency * (frequency * x[*index]).cos();
            }
            BasisEntry::Cosine { index, frequency } => {
                out[*index] = -frequency * (frequency * x[*index]).sin();
            }
            BasisEntry::FourierFeature { weights, phase } => {
                let s = -(dot(weights, x) + phase).sin();
                for (o, w) in out.iter_mut().zip(weights) {
                    *o = w * s;
                }
            }
            BasisEntry::TrigMonomial {
                power_index,
                power,
                trig_index,
                frequency,
                trig,
            } => {
                let arg = frequency * x[*trig_index];
                let poly = x[*power_index].powi(*power as i32);
                let dpoly = if *power == 0 {
                    0.0
                } else {
                    *power as f64 * x[*power_index].powi(*power as i32 - 1)
                };
                let dtrig = match trig {
                    Trig::Sin => frequency * arg.cos(),
                    Trig::Cos => -frequency * arg.sin(),
                };
                out[*power_index] += dpoly * trig_eval(*trig, arg);
                out[*trig_index] += poly * dtrig;
            }
            BasisEntry::Tanh { index, scale } => {
                let t = (scale * x[*index]).tanh();
                out[*index] = scale * (1.0 - t * t);
            }
        }
    }
}

fn trig_eval(trig: Trig, arg: f64) -> f64 {
    match trig {
        Trig::Sin => arg.sin(),
        Trig::Cos => arg.cos(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How a dictionary is requested in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DictionarySpec {
    Preset { preset: String },
    Explicit {
        state_dim: usize,
        entries: Vec<BasisEntry>,
    },
}

impl DictionarySpec {
    pub fn preset(name: &str) -> Self {
        DictionarySpec::Preset {
            preset: name.to_string(),
        }
    }

    /// Hex SHA-256 of the canonical JSON form; ties certificates to models.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("dictionary spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservableDictionary {
    state_dim: usize,
    entries: Vec<BasisEntry>,
    spec: DictionarySpec,
}

/// Seed for the fixed random Fourier features of the `arm20` preset.
const ARM20_FEATURE_SEED: u64 = 20;

pub fn build_dictionary(spec: &DictionarySpec) -> Result<ObservableDictionary> {
    let (state_dim, entries) = match spec {
        DictionarySpec::Preset { preset } => match preset.as_str() {
            "vdp15" => (2, vdp15_entries()),
            "arm20" => (2, arm20_entries()),
            other => return Err(Error::UnknownPreset(other.to_string())),
        },
        DictionarySpec::Explicit { state_dim, entries } => (*state_dim, entries.clone()),
    };
    if state_dim == 0 {
        return Err(Error::InvalidParameter("state_dim must be at least 1".into()));
    }
    if entries.len() <= state_dim {
        return Err(Error::DictionaryTooSmall {
            r: entries.len(),
            n: state_dim,
        });
    }
    ObservableDictionary::from_entries(state_dim, entries, spec.clone())
}

fn vdp15_entries() -> Vec<BasisEntry> {
    let mut e = vec![
        BasisEntry::Identity { index: 0 },
        BasisEntry::Identity { index: 1 },
    ];
    for deg in 2..=3u32 {
        for a in (0..=deg).rev() {
            e.push(BasisEntry::Monomial {
                powers: vec![a, deg - a],
            });
        }
    }
    for (index, frequency) in [(0, 1.0), (1, 1.0)] {
        e.push(BasisEntry::Sine { index, frequency });
        e.push(BasisEntry::Cosine { index, frequency });
    }
    e.push(BasisEntry::Sine {
        index: 0,
        frequency: 2.0,
    });
    e.push(BasisEntry::Cosine {
        index: 0,
        frequency: 2.0,
    });
    e
}

fn arm20_entries() -> Vec<BasisEntry> {
    let mut e = vec![
        BasisEntry::Identity { index: 0 },
        BasisEntry::Identity { index: 1 },
        BasisEntry::Sine {
            index: 0,
            frequency: 1.0,
        },
        BasisEntry::Cosine {
            index: 0,
            frequency: 1.0,
        },
        BasisEntry::Sine {
            index: 0,
            frequency: 2.0,
        },
        BasisEntry::Cosine {
            index: 0,
            frequency: 2.0,
        },
        BasisEntry::TrigMonomial {
            power_index: 1,
            power: 1,
            trig_index: 0,
            frequency: 1.0,
            trig: Trig::Sin,
        },
        BasisEntry::TrigMonomial {
            power_index: 1,
            power: 1,
            trig_index: 0,
            frequency: 1.0,
            trig: Trig::Cos,
        },
        BasisEntry::Tanh {
            index: 1,
            scale: 5.0,
        },
        BasisEntry::Monomial {
            powers: vec![0, 2],
        },
        BasisEntry::Monomial {
            powers: vec![0, 3],
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(ARM20_FEATURE_SEED);
    // angle in radians, velocity spans a few rad/s
    let scales = [1.0, 0.5];
    for _ in 0..9 {
        let weights = scales
            .iter()
            .map(|s| s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        e.push(BasisEntry::FourierFeature { weights, phase });
    }
    e
}

impl ObservableDictionary {
    fn from_entries(
        state_dim: usize,
        entries: Vec<BasisEntry>,
        spec: DictionarySpec,
    ) -> Result<Self> {
        for (i, entry) in entries.iter().enumerate() {
            entry.validate(state_dim)?;
            if entries[..i].contains(entry) {
                return Err(Error::DuplicateEntry(i));
            }
        }
        for (i, entry) in entries.iter().take(state_dim).enumerate() {
            if *entry != (BasisEntry::Identity { index: i }) {
                return Err(Error::InvalidEntry(format!(
                    "entry {i} must be the identity coordinate x{}",
                    i + 1
                )));
            }
        }
        Ok(Self {
            state_dim,
            entries,
            spec,
        })
    }

    /// The degenerate dictionary `Φ(x) = x` (r = n). Only meaningful for
    /// identification checks on plants that are already linear.
    pub fn identity(state_dim: usize) -> Self {
        let entries: Vec<_> = (0..state_dim)
            .map(|index| BasisEntry::Identity { index })
            .collect();
        let spec = DictionarySpec::Explicit {
            state_dim,
            entries: entries.clone(),
        };
        Self {
            state_dim,
            entries,
            spec,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn total_dim(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[BasisEntry] {
        &self.entries
    }

    pub fn spec(&self) -> &DictionarySpec {
        &self.spec
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::Dimension(format!(
                "state has length {}, dictionary expects {}",
                x.len(),
                self.state_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state passed to the lifting map"));
        }
        Ok(())
    }

    pub fn lift(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_state(x)?;
        Ok(DVector::from_iterator(
            self.entries.len(),
            self.entries.iter().map(|e| e.value(x)),
        ))
    }

    /// `DΦ(x)`, one gradient per row.
    pub fn lift_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        let n = self.state_dim;
        let mut jac = DMatrix::zeros(self.entries.len(), n);
        let mut row = vec![0.0; n];
        for (i, e) in self.entries.iter().enumerate() {
            e.gradient(x, &mut row);
            for j in 0..n {
                jac[(i, j)] = row[j];
            }
        }
        Ok(jac)
    }

    /// Selector `C_o` picking the identity entries of the measured coordinates.
    pub fn output_matrix(&self, measured: &[usize]) -> Result<DMatrix<f64>> {
        let mut c = DMatrix::zeros(measured.len(), self.total_dim());
        for (row, &index) in measured.iter().enumerate() {
            if index >= self.state_dim {
                return Err(Error::IndexOutOfRange {
                    index,
                    dim: self.state_dim,
                });
            }
            c[(row, index)] = 1.0;
        }
        Ok(c)
    }

    /// First `n` components of a lifted vector.
    pub fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        z.rows(0, self.state_dim).into_owned()
    }
}
