//! Complexity budgets as functions of the target accuracy `ε`.
//!
//! Rank and width of a single operator are exact closed forms. Everything
//! else is an asymptotic order with unknown constants, returned as an
//! [`OrderRow`] evaluated with all constants set to 1. Orders are
//! carried as `log10` because several of them overflow `f64` already at
//! moderate `ε`.

use crate::error::{invalid, Error, Result};

/// A modulus of continuity `ω` with its inverse.
#[derive(Debug, Clone, PartialEq)]
pub enum Modulus {
    /// `ω(t) = L t`.
    Lipschitz { constant: f64 },
    /// `ω(t) = C t^α`, `0 < α ≤ 1`.
    Holder { constant: f64, exponent: f64 },
    /// `ω(t) = C₀ / ln(1 + C₁/t)`.
    Logarithmic { c0: f64, c1: f64 },
    /// Piecewise-linear through `(t, ω(t))` points with `t` and `ω` strictly increasing.
    Table { points: Vec<(f64, f64)> },
}

impl Modulus {
    pub fn lipschitz() -> Self {
        Modulus::Lipschitz { constant: 1.0 }
    }

    pub fn logarithmic() -> Self {
        Modulus::Logarithmic { c0: 1.0, c1: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Modulus::Lipschitz { constant } => *constant > 0.0,
            Modulus::Holder { constant, exponent } => *constant > 0.0 && *exponent > 0.0 && *exponent <= 1.0,
            Modulus::Logarithmic { c0, c1 } => *c0 > 0.0 && *c1 > 0.0,
            Modulus::Table { points } => {
                points.len() >= 2 && points.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 > w[0].1)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(invalid("modulus must be positive and strictly increasing"))
        }
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(invalid("modulus argument must be non-negative"));
        }
        Ok(match self {
            Modulus::Lipschitz { constant } => constant * t,
            Modulus::Holder { constant, exponent } => constant * t.powf(*exponent),
            Modulus::Logarithmic { c0, c1 } => {
                if t == 0.0 {
                    0.0
                } else {
                    c0 / (c1 / t).ln_1p()
                }
            }
            Modulus::Table { points } => interpolate(points.iter().copied(), t)?,
        })
    }

    pub fn inverse(&self, y: f64) -> Result<f64> {
        if !(y >= 0.0) {
            return Err(invalid("inverse modulus argument must be non-negative"));
        }
        Ok(match self {
            Modulus::Lipschitz { constant } => y / constant,
            Modulus::Holder { constant, exponent } => (y / constant).powf(exponent.recip()),
            Modulus::Logarithmic { c0, c1 } => {
                if y == 0.0 {
                    0.0
                } else {
                    c1 / (c0 / y).exp_m1()
                }
            }
            Modulus::Table { points } => interpolate(points.iter().map(|&(t, w)| (w, t)), y)?,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Modulus::Lipschitz { .. } => "lipschitz",
            Modulus::Holder { .. } => "holder",
            Modulus::Logarithmic { .. } => "logarithmic",
            Modulus::Table { .. } => "table",
        }
    }
}

fn interpolate(points: impl Iterator<Item = (f64, f64)> + Clone, x: f64) -> Result<f64> {
    let lo = points.clone().next().map(|p| p.0).unwrap_or(f64::NAN);
    let hi = points.clone().last().map(|p| p.0).unwrap_or(f64::NAN);
    if !(x >= lo && x <= hi) {
        return Err(Error::Range { value: x, lo, hi });
    }
    let pts: Vec<_> = points.collect();
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x <= x1 {
            return Ok(y0 + (y1 - y0) * (x - x0) / (x1 - x0));
        }
    }
    Ok(pts[pts.len() - 1].1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetInputs {
    pub eps: f64,
    pub modulus: Modulus,
    pub d1: usize,
    pub d2: usize,
    pub s1: f64,
    pub s2: f64,
    pub d_in: usize,
    pub d_out: usize,
    pub diam: f64,
    /// Tree valency used by the leaf-count order.
    pub valency: usize,
}

impl BudgetInputs {
    /// Scalar maps on the unit interval with `s = 2`, unit diameter, binary tree.
    pub fn new(eps: f64, modulus: Modulus) -> Self {
        Self {
            eps,
            modulus,
            d1: 1,
            d2: 1,
            s1: 2.0,
            s2: 2.0,
            d_in: 1,
            d_out: 1,
            diam: 1.0,
            valency: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.modulus.validate()?;
        if !(self.eps > 0.0 && self.diam > 0.0) {
            return Err(invalid("ε and diam(K) must be positive"));
        }
        if self.d1 == 0 || self.d2 == 0 || self.d_in == 0 || self.d_out == 0 || self.valency < 2 {
            return Err(invalid("dimensions must be positive and valency at least 2"));
        }
        if !(self.s1 > self.d1 as f64 && self.s2 > self.d2 as f64) {
            return Err(invalid("smoothness must exceed dimension (s_i > d_i)"));
        }
        Ok(())
    }
}

/// Exact rank for a single operator.
///
/// `⌈max{(ε⁻¹ diam 2^{7/2})^{d₁/s₁}, (8 ω(ε⁻¹ 2^{3/2} diam^{d_in}))^{d₂/s₂}}⌉`
pub fn rank(inputs: &BudgetInputs) -> Result<u64> {
    let (a, b) = rank_branches(inputs)?;
    let n = a.max(b).ceil();
    if !(n.is_finite() && n < u64::MAX as f64) {
        return Err(Error::Numeric("rank".into()));
    }
    Ok(n as u64)
}

/// The two arguments of the rank maximum, before the ceiling.
pub fn rank_branches(inputs: &BudgetInputs) -> Result<(f64, f64)> {
    let i = inputs;
    let a = (i.diam * 2f64.powf(3.5) / i.eps).powf(i.d1 as f64 / i.s1);
    let w = i.modulus.eval(2f64.powf(1.5) * i.diam.powi(i.d_in as i32) / i.eps)?;
    let b = (8.0 * w).powf(i.d2 as f64 / i.s2);
    Ok((a, b))
}

/// `N d_in + N d_out + 2`.
pub fn width(rank: u64, d_in: usize, d_out: usize) -> u64 {
    rank * d_in as u64 + rank * d_out as u64 + 2
}

/// An order-of-magnitude entry; the formula is evaluated with unit constants.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderRow {
    pub quantity: &'static str,
    pub formula: &'static str,
    pub log10: f64,
}

impl OrderRow {
    fn new(quantity: &'static str, formula: &'static str, log10: f64) -> Self {
        Self {
            quantity,
            formula,
            log10,
        }
    }

    pub fn value(&self) -> f64 {
        10f64.powf(self.log10)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1 {
    pub rank: u64,
    pub width: u64,
    pub depth: OrderRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetTables {
    pub eps: f64,
    pub table1: Table1,
    pub distributed: Vec<OrderRow>,
    pub classical: Vec<OrderRow>,
    pub active: OrderRow,
}

/// `max{ε⁻¹, ω(ε⁻¹)}`.
fn scale(i: &BudgetInputs) -> Result<f64> {
    Ok(i.eps.recip().max(i.modulus.eval(i.eps.recip())?))
}

pub fn budget_tables(inputs: &BudgetInputs) -> Result<BudgetTables> {
    inputs.validate()?;
    let i = inputs;
    let om = &i.modulus;
    let n = rank(i)?;
    let nf = n as f64;
    let (din, dout) = (i.d_in as f64, i.d_out as f64);

    let inner = om.inverse(i.eps / ((2.0 + nf * din / 2.0) * nf * dout))?;
    let depth1 = (nf * dout).log10() + nf * din * i.diam.log10() - 2.0 * nf * din * inner.log10();
    let table1 = Table1 {
        rank: n,
        width: width(n, i.d_in, i.d_out),
        depth: OrderRow::new(
            "depth",
            "N d_out diam^(N d_in) (w^-1(eps / ((2 + N d_in/2) N d_out)))^(-2 N d_in)",
            depth1,
        ),
    };

    let m = scale(i)?;
    let lm = m.log10();
    let inv_m2 = om.inverse(i.eps / (m * m))?;
    let leaves = (inv_m2.ln() / (i.valency as f64).ln()).abs().powf(i.d1 as f64 / 2.0);
    let inv_e = om.inverse(i.eps.recip())?;
    let r1 = i.eps.powf(-2.0 * i.d1 as f64 / i.s1);
    let r2 = inv_e.powf(2.0 * i.d2 as f64 / i.s2);
    let routing = om.inverse(i.eps / r1.max(r2))?;
    let distributed = vec![
        OrderRow::new("depth", "M", lm),
        OrderRow::new("width", "M", lm),
        OrderRow::new("rank", "M", lm),
        OrderRow::new("leaves", "|log_v w^-1(eps / M^2)|^(d1/2)", leaves.log10()),
        OrderRow::new(
            "routing",
            "w^-1(eps / (eps^(-2 d1/s1) v [w^-1(1/eps)]^(2 d2/s2)))",
            routing.log10(),
        ),
    ];
    let classical = vec![
        OrderRow::new("depth", "M / (w^-1(eps M^-2))^(2M)", lm - 2.0 * m * inv_m2.log10()),
        OrderRow::new("width", "M", lm),
        OrderRow::new("rank", "M", lm),
        OrderRow::new("leaves", "1", 0.0),
        OrderRow::new("routing", "1", 0.0),
    ];

    let a1 = i.eps.powf(-(i.d1 as f64) / i.s1).max(inv_e.powf(i.d2 as f64 / i.s2));
    let a2 = om.inverse(
        i.eps
            .powf(1.0 + 2.0 * i.d1 as f64 / i.s1)
            .max(i.eps * inv_e.powf(2.0 * i.d2 as f64 / i.s2)),
    )?;
    let active = OrderRow::new(
        "active",
        "(eps^(-d1/s1) v [w^-1(1/eps)]^(d2/s2))^4 + w^-1(eps^(1+2 d1/s1) v eps [w^-1(1/eps)]^(2 d2/s2))",
        (a1.powi(4) + a2).log10(),
    );
    Ok(BudgetTables {
        eps: i.eps,
        table1,
        distributed,
        classical,
        active,
    })
}
