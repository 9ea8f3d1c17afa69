//! Native, dimension-scalable test problems with analytic gradients, plus a
//! central-difference gradient validator.
//!
//! The formulas follow the classical published definitions (the CUTE
//! collection of Bongartz, Conn, Gould and Toint; Moré, Garbow and
//! Hillstrom for the Box function; Toint's chained Rosenbrock). Evaluators
//! are O(n) and reentrant.

use nalgebra::DVector;
use thiserror::Error;

use crate::solver::Objective;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("invalid dimension {dim} for {name}: {constraint}")]
    InvalidDimension {
        name: &'static str,
        dim: usize,
        constraint: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Arwhead,
    Liarwhd,
    Powellsg,
    Bdqrtic,
    Broydn3dls,
    Dixmaan(DixmaanVariant),
    Chnrosnb,
    Nondquar,
    Tquartic,
    Box3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DixmaanVariant {
    A,
    E,
    I,
}

impl DixmaanVariant {
    /// (alpha, beta, gamma, delta) and the four power indices.
    fn constants(self) -> ([f64; 4], [i32; 4]) {
        match self {
            DixmaanVariant::A => ([1.0, 0.0, 0.125, 0.125], [0, 0, 0, 0]),
            DixmaanVariant::E => ([1.0, 0.0, 0.125, 0.125], [1, 0, 0, 1]),
            DixmaanVariant::I => ([1.0, 0.0, 0.125, 0.125], [2, 0, 0, 2]),
        }
    }
}

/// Weights of the chained Rosenbrock problem (50 values; entries 2..=50 are
/// used by the objective).
const CHNROSNB_ALPHA: [f64; 50] = [
    1.25, 1.40, 2.40, 1.40, 1.75, 1.20, 2.25, 1.20, 1.00, 1.10, //
    1.50, 1.60, 1.25, 1.25, 1.20, 1.20, 1.40, 0.50, 0.50, 1.25, //
    1.80, 0.75, 1.25, 1.40, 1.60, 2.00, 1.00, 1.60, 1.25, 2.75, //
    1.25, 1.25, 1.25, 3.00, 1.50, 2.00, 1.25, 1.40, 1.80, 1.50, //
    2.20, 1.40, 1.50, 1.25, 2.00, 1.50, 1.25, 1.40, 0.60, 1.50,
];

/// One instantiated test problem.
#[derive(Debug, Clone)]
pub struct Problem {
    family: Family,
    name: &'static str,
    dim: usize,
}

impl Problem {
    /// Instantiates a problem by its catalog name. `dim` of `None` takes the
    /// family's desk-scale default.
    pub fn by_name(name: &str, dim: Option<usize>) -> Result<Problem, ProblemError> {
        let upper = name.to_ascii_uppercase();
        let (family, canonical, default_dim) = match upper.as_str() {
            "ARWHEAD" => (Family::Arwhead, "ARWHEAD", 100),
            "LIARWHD" => (Family::Liarwhd, "LIARWHD", 100),
            "POWELLSG" => (Family::Powellsg, "POWELLSG", 100),
            "BDQRTIC" => (Family::Bdqrtic, "BDQRTIC", 100),
            "BROYDN3DLS" => (Family::Broydn3dls, "BROYDN3DLS", 100),
            "DIXMAANA" => (Family::Dixmaan(DixmaanVariant::A), "DIXMAANA", 99),
            "DIXMAANE" => (Family::Dixmaan(DixmaanVariant::E), "DIXMAANE", 99),
            "DIXMAANI" => (Family::Dixmaan(DixmaanVariant::I), "DIXMAANI", 99),
            "CHNROSNB" => (Family::Chnrosnb, "CHNROSNB", 50),
            "NONDQUAR" => (Family::Nondquar, "NONDQUAR", 100),
            "TQUARTIC" => (Family::Tquartic, "TQUARTIC", 100),
            "BOX" => (Family::Box3, "BOX", 3),
            _ => return Err(ProblemError::UnknownProblem(name.to_string())),
        };
        let dim = dim.unwrap_or(default_dim);
        let problem = Problem {
            family,
            name: canonical,
            dim,
        };
        problem.validate_dim()?;
        Ok(problem)
    }

    /// The full catalog at desk-scale default dimensions.
    pub fn catalog() -> Vec<Problem> {
        [
            "ARWHEAD",
            "LIARWHD",
            "POWELLSG",
            "BDQRTIC",
            "BROYDN3DLS",
            "DIXMAANA",
            "DIXMAANE",
            "DIXMAANI",
            "CHNROSNB",
            "NONDQUAR",
            "TQUARTIC",
            "BOX",
        ]
        .iter()
        .map(|name| Problem::by_name(name, None).expect("catalog entries are valid"))
        .collect()
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    /// Known optimal objective value, where the family has a standard one.
    pub fn known_optimum(&self) -> Option<f64> {
        match self.family {
            Family::Arwhead
            | Family::Liarwhd
            | Family::Powellsg
            | Family::Broydn3dls
            | Family::Chnrosnb
            | Family::Nondquar
            | Family::Tquartic
            | Family::Box3 => Some(0.0),
            Family::Dixmaan(_) => Some(1.0),
            Family::Bdqrtic => None,
        }
    }

    fn validate_dim(&self) -> Result<(), ProblemError> {
        let fail = |constraint: &'static str| {
            Err(ProblemError::InvalidDimension {
                name: self.name,
                dim: self.dim,
                constraint,
            })
        };
        match self.family {
            Family::Arwhead if self.dim < 2 => fail("requires n >= 2"),
            Family::Liarwhd if self.dim < 2 => fail("requires n >= 2"),
            Family::Powellsg if self.dim < 4 || !self.dim.is_multiple_of(4) => {
                fail("requires n divisible by 4")
            }
            Family::Bdqrtic if self.dim < 5 => fail("requires n >= 5"),
            Family::Broydn3dls if self.dim < 2 => fail("requires n >= 2"),
            Family::Dixmaan(_) if self.dim < 3 || !self.dim.is_multiple_of(3) => {
                fail("requires n divisible by 3")
            }
            Family::Chnrosnb if self.dim != 50 => fail("fixed at n = 50"),
            Family::Nondquar if self.dim < 3 => fail("requires n >= 3"),
            Family::Tquartic if self.dim < 2 => fail("requires n >= 2"),
            Family::Box3 if self.dim != 3 => fail("fixed at n = 3"),
            _ => Ok(()),
        }
    }
}

impl Objective for Problem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn x0(&self) -> DVector<f64> {
        let n = self.dim;
        match self.family {
            Family::Arwhead | Family::Bdqrtic => DVector::from_element(n, 1.0),
            Family::Liarwhd => DVector::from_element(n, 4.0),
            Family::Powellsg => {
                DVector::from_fn(n, |i, _| match i % 4 {
                    0 => 3.0,
                    1 => -1.0,
                    2 => 0.0,
                    _ => 1.0,
                })
            }
            Family::Broydn3dls | Family::Chnrosnb => DVector::from_element(n, -1.0),
            Family::Dixmaan(_) => DVector::from_element(n, 2.0),
            Family::Nondquar => DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 }),
            Family::Tquartic => DVector::from_element(n, 0.1),
            Family::Box3 => DVector::from_column_slice(&[0.0, 10.0, 20.0]),
        }
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        let n = self.dim;
        match self.family {
            Family::Arwhead => {
                let xn2 = x[n - 1] * x[n - 1];
                (0..n - 1)
                    .map(|i| {
                        let t = x[i] * x[i] + xn2;
                        t * t - 4.0 * x[i] + 3.0
                    })
                    .sum()
            }
            Family::Liarwhd => (0..n)
                .map(|i| {
                    let q = x[i] * x[i] - x[0];
                    4.0 * q * q + (x[i] - 1.0) * (x[i] - 1.0)
                })
                .sum(),
            Family::Powellsg => {
                let mut f = 0.0;
                for b in 0..n / 4 {
                    let (a, c, d, e) = (x[4 * b], x[4 * b + 1], x[4 * b + 2], x[4 * b + 3]);
                    f += (a + 10.0 * c).powi(2)
                        + 5.0 * (d - e).powi(2)
                        + (c - 2.0 * d).powi(4)
                        + 10.0 * (a - e).powi(4);
                }
                f
            }
            Family::Bdqrtic => {
                let xn2 = x[n - 1] * x[n - 1];
                (0..n - 4)
                    .map(|i| {
                        let lin = 3.0 - 4.0 * x[i];
                        let q = x[i] * x[i]
                            + 2.0 * x[i + 1] * x[i + 1]
                            + 3.0 * x[i + 2] * x[i + 2]
                            + 4.0 * x[i + 3] * x[i + 3]
                            + 5.0 * xn2;
                        lin * lin + q * q
                    })
                    .sum()
            }
            Family::Broydn3dls => (0..n).map(|i| broyden_residual(x, i).powi(2)).sum(),
            Family::Dixmaan(v) => dixmaan_eval(x, v),
            Family::Chnrosnb => (1..n)
                .map(|i| {
                    let u = x[i - 1] - x[i] * x[i];
                    4.0 * CHNROSNB_ALPHA[i] * u * u + (1.0 - x[i]).powi(2)
                })
                .sum(),
            Family::Nondquar => {
                let mut f = (x[0] - x[1]).powi(2) + (x[n - 2] + x[n - 1]).powi(2);
                for i in 0..n - 2 {
                    f += (x[i] + x[i + 1] + x[n - 1]).powi(4);
                }
                f
            }
            Family::Tquartic => {
                let x12 = x[0] * x[0];
                (x[0] - 1.0).powi(2)
                    + (1..n).map(|i| (x12 - x[i] * x[i]).powi(2)).sum::<f64>()
            }
            Family::Box3 => (1..=10)
                .map(|j| box3_residual(x, j).powi(2))
                .sum(),
        }
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.dim;
        let mut g = DVector::zeros(n);
        match self.family {
            Family::Arwhead => {
                let xn = x[n - 1];
                let xn2 = xn * xn;
                let mut tsum = 0.0;
                for i in 0..n - 1 {
                    let t = x[i] * x[i] + xn2;
                    g[i] = 4.0 * x[i] * t - 4.0;
                    tsum += t;
                }
                g[n - 1] = 4.0 * xn * tsum;
            }
            Family::Liarwhd => {
                let mut qsum = 0.0;
                for i in 0..n {
                    let q = x[i] * x[i] - x[0];
                    g[i] += 16.0 * q * x[i] + 2.0 * (x[i] - 1.0);
                    qsum += q;
                }
                g[0] -= 8.0 * qsum;
            }
            Family::Powellsg => {
                for b in 0..n / 4 {
                    let (i1, i2, i3, i4) = (4 * b, 4 * b + 1, 4 * b + 2, 4 * b + 3);
                    let (a, c, d, e) = (x[i1], x[i2], x[i3], x[i4]);
                    let t1 = a + 10.0 * c;
                    let t2 = d - e;
                    let t3 = c - 2.0 * d;
                    let t4 = a - e;
                    g[i1] = 2.0 * t1 + 40.0 * t4.powi(3);
                    g[i2] = 20.0 * t1 + 4.0 * t3.powi(3);
                    g[i3] = 10.0 * t2 - 8.0 * t3.powi(3);
                    g[i4] = -10.0 * t2 - 40.0 * t4.powi(3);
                }
            }
            Family::Bdqrtic => {
                let xn = x[n - 1];
                let xn2 = xn * xn;
                for i in 0..n - 4 {
                    let lin = 3.0 - 4.0 * x[i];
                    let q = x[i] * x[i]
                        + 2.0 * x[i + 1] * x[i + 1]
                        + 3.0 * x[i + 2] * x[i + 2]
                        + 4.0 * x[i + 3] * x[i + 3]
                        + 5.0 * xn2;
                    g[i] += -8.0 * lin + 4.0 * q * x[i];
                    g[i + 1] += 8.0 * q * x[i + 1];
                    g[i + 2] += 12.0 * q * x[i + 2];
                    g[i + 3] += 16.0 * q * x[i + 3];
                    g[n - 1] += 20.0 * q * xn;
                }
            }
            Family::Broydn3dls => {
                for i in 0..n {
                    let r = broyden_residual(x, i);
                    g[i] += 2.0 * r * (3.0 - 4.0 * x[i]);
                    if i > 0 {
                        g[i - 1] -= 2.0 * r;
                    }
                    if i + 1 < n {
                        g[i + 1] -= 4.0 * r;
                    }
                }
            }
            Family::Dixmaan(v) => dixmaan_grad(x, v, &mut g),
            Family::Chnrosnb => {
                for i in 1..n {
                    let u = x[i - 1] - x[i] * x[i];
                    let w = 4.0 * CHNROSNB_ALPHA[i];
                    g[i - 1] += 2.0 * w * u;
                    g[i] += -4.0 * w * u * x[i] - 2.0 * (1.0 - x[i]);
                }
            }
            Family::Nondquar => {
                g[0] += 2.0 * (x[0] - x[1]);
                g[1] -= 2.0 * (x[0] - x[1]);
                g[n - 2] += 2.0 * (x[n - 2] + x[n - 1]);
                g[n - 1] += 2.0 * (x[n - 2] + x[n - 1]);
                for i in 0..n - 2 {
                    let c = 4.0 * (x[i] + x[i + 1] + x[n - 1]).powi(3);
                    g[i] += c;
                    g[i + 1] += c;
                    g[n - 1] += c;
                }
            }
            Family::Tquartic => {
                g[0] = 2.0 * (x[0] - 1.0);
                let x12 = x[0] * x[0];
                for i in 1..n {
                    let q = x12 - x[i] * x[i];
                    g[0] += 4.0 * q * x[0];
                    g[i] = -4.0 * q * x[i];
                }
            }
            Family::Box3 => {
                for j in 1..=10 {
                    let t = 0.1 * j as f64;
                    let r = box3_residual(x, j);
                    g[0] += 2.0 * r * (-t * (-t * x[0]).exp());
                    g[1] += 2.0 * r * (t * (-t * x[1]).exp());
                    g[2] += 2.0 * r * (-((-t).exp() - (-10.0 * t).exp()));
                }
            }
        }
        g
    }
}

fn broyden_residual(x: &DVector<f64>, i: usize) -> f64 {
    let n = x.len();
    let left = if i > 0 { x[i - 1] } else { 0.0 };
    let right = if i + 1 < n { x[i + 1] } else { 0.0 };
    (3.0 - 2.0 * x[i]) * x[i] - left - 2.0 * right + 1.0
}

fn box3_residual(x: &DVector<f64>, j: usize) -> f64 {
    let t = 0.1 * j as f64;
    (-t * x[0]).exp() - (-t * x[1]).exp() - x[2] * ((-t).exp() - (-10.0 * t).exp())
}

fn dixmaan_eval(x: &DVector<f64>, variant: DixmaanVariant) -> f64 {
    let n = x.len();
    let m = n / 3;
    let ([alpha, beta, gamma, delta], [k1, k2, k3, k4]) = variant.constants();
    let frac = |i: usize, k: i32| ((i + 1) as f64 / n as f64).powi(k);
    let mut f = 1.0;
    for i in 0..n {
        f += alpha * frac(i, k1) * x[i] * x[i];
    }
    if beta != 0.0 {
        for i in 0..n - 1 {
            let t = x[i + 1] + x[i + 1] * x[i + 1];
            f += beta * frac(i, k2) * x[i] * x[i] * t * t;
        }
    }
    for i in 0..2 * m {
        f += gamma * frac(i, k3) * x[i] * x[i] * x[i + m].powi(4);
    }
    for i in 0..m {
        f += delta * frac(i, k4) * x[i] * x[i + 2 * m];
    }
    f
}

fn dixmaan_grad(x: &DVector<f64>, variant: DixmaanVariant, g: &mut DVector<f64>) {
    let n = x.len();
    let m = n / 3;
    let ([alpha, beta, gamma, delta], [k1, k2, k3, k4]) = variant.constants();
    let frac = |i: usize, k: i32| ((i + 1) as f64 / n as f64).powi(k);
    for i in 0..n {
        g[i] += 2.0 * alpha * frac(i, k1) * x[i];
    }
    if beta != 0.0 {
        for i in 0..n - 1 {
            let c = beta * frac(i, k2);
            let t = x[i + 1] + x[i + 1] * x[i + 1];
            g[i] += 2.0 * c * x[i] * t * t;
            g[i + 1] += c * x[i] * x[i] * 2.0 * t * (1.0 + 2.0 * x[i + 1]);
        }
    }
    for i in 0..2 * m {
        let c = gamma * frac(i, k3);
        g[i] += 2.0 * c * x[i] * x[i + m].powi(4);
        g[i + m] += 4.0 * c * x[i] * x[i] * x[i + m].powi(3);
    }
    for i in 0..m {
        let c = delta * frac(i, k4);
        g[i] += c * x[i + 2 * m];
        g[i + 2 * m] += c * x[i];
    }
}

/// Central-difference gradient check: returns the worst componentwise
/// relative error, with step `h·max(1, |x_i|)` per component.
pub fn fd_gradient_check(problem: &dyn Objective, x: &DVector<f64>, h: f64) -> f64 {
    assert!(h > 0.0);
    let g = problem.grad(x);
    let mut worst: f64 = 0.0;
    let mut xp = x.clone();
    for i in 0..x.len() {
        let hi = h * x[i].abs().max(1.0);
        let orig = x[i];
        xp[i] = orig + hi;
        let f_plus = problem.eval(&xp);
        xp[i] = orig - hi;
        let f_minus = problem.eval(&xp);
        xp[i] = orig;
        let fd = (f_plus - f_minus) / (2.0 * hi);
        let denom = g[i].abs().max(fd.abs()).max(1.0);
        worst = worst.max((fd - g[i]).abs() / denom);
    }
    worst
}
