//! Simulation data generators.

use ndarray::Array2;

use crate::data::SampleSet;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DgpKind {
    /// Scalar `x` given `z ~ U(-2, 2)^3`.
    CondSim,
    /// `x` decoded from a 2-dim latent `u`.
    UncondSim,
}

impl DgpKind {
    pub fn name(self) -> &'static str {
        match self {
            DgpKind::CondSim => "cond_sim",
            DgpKind::UncondSim => "uncond_sim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cond_sim" => Ok(DgpKind::CondSim),
            "uncond_sim" => Ok(DgpKind::UncondSim),
            other => Err(Error::Parse(format!("unknown dgp {other:?}"))),
        }
    }

    /// `(d_x source, d_x target, d_aux)` where aux is `z` or `u`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            DgpKind::CondSim => (1, 1, 3),
            DgpKind::UncondSim => (5, 3, 2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Source,
    Target,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Target => "target",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub seed: u64,
}

impl DgpSpec {
    /// Stream for one role and purpose (e.g. training or evaluation draws).
    pub fn rng(&self, role: Role, purpose: &str) -> Rng {
        rng::derived(self.seed, &format!("{}/{}/{purpose}", self.kind.name(), role.name()), 0)
    }
}

/// Observations `x` with their covariates (`z`) or latents (`u`).
#[derive(Debug, Clone, PartialEq)]
pub struct DgpDraw {
    pub x: SampleSet,
    pub aux: SampleSet,
}

impl DgpDraw {
    pub fn head(&self, n: usize) -> DgpDraw {
        DgpDraw {
            x: self.x.head(n),
            aux: self.aux.head(n),
        }
    }
}

/// Deterministic part `sin z1 + cos z2 + z3^2` shared by both tasks.
pub fn cond_signal(z: &[f64]) -> f64 {
    z[0].sin() + z[1].cos() + z[2] * z[2]
}

pub fn uncond_source_map(u: &[f64]) -> [f64; 5] {
    let (u1, u2) = (u[0], u[1]);
    [
        u1.sin() + u2.cos(),
        u1 * u1 + u2 * u2,
        (u1 * u2).tanh(),
        (u1 - u2).exp(),
        (u1.abs() + 1.0).ln() + (u2.abs() + 1.0).ln(),
    ]
}

pub fn uncond_target_map(u: &[f64]) -> [f64; 3] {
    let (u1, u2) = (u[0], u[1]);
    [u1.sin() + u2.tanh(), u1 * u1 + u2, (u1 - u2).exp()]
}

/// Draws `n` rows for `role`. Each row consumes its random numbers in a
/// fixed order, so a prefix of a larger draw equals a smaller draw.
pub fn draw_dgp(kind: DgpKind, role: Role, n: usize, rng: &mut Rng) -> DgpDraw {
    let (d_s, d_t, d_aux) = kind.dims();
    let d_x = match role {
        Role::Source => d_s,
        Role::Target => d_t,
    };
    let mut x = Array2::zeros((n, d_x));
    let mut aux = Array2::zeros((n, d_aux));
    for i in 0..n {
        match kind {
            DgpKind::CondSim => {
                let z = [
                    rng::uniform(rng, -2.0, 2.0),
                    rng::uniform(rng, -2.0, 2.0),
                    rng::uniform(rng, -2.0, 2.0),
                ];
                let noise = match role {
                    Role::Source => rng::normal(rng),
                    Role::Target => rng::uniform(rng, -1.0, 1.0).exp(),
                };
                x[[i, 0]] = cond_signal(&z) + noise;
                for (j, v) in z.iter().enumerate() {
                    aux[[i, j]] = *v;
                }
            }
            DgpKind::UncondSim => {
                let e1 = rng::normal(rng);
                let e2 = rng::normal(rng);
                let u = [e1.sin(), e2.cos()];
                match role {
                    Role::Source => {
                        for (j, v) in uncond_source_map(&u).iter().enumerate() {
                            x[[i, j]] = *v;
                        }
                    }
                    Role::Target => {
                        for (j, v) in uncond_target_map(&u).iter().enumerate() {
                            x[[i, j]] = *v;
                        }
                    }
                }
                aux[[i, 0]] = u[0];
                aux[[i, 1]] = u[1];
            }
        }
    }
    DgpDraw {
        x: SampleSet::new(x),
        aux: SampleSet::new(aux),
    }
}
