//! Exact enumeration over finite tabular instances of the refinement
//! objective: pivot marginalization, the two-stage argmax chain, and the
//! lower bound obtained by pinning the pivot to the image together with its
//! product-of-expectations plus covariance split.
//!
//! Expectations are uniform over `U x S x I`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, validation, Result};
use crate::seed;

const STOCHASTIC_TOL: f64 = 1e-12;

/// Row-major table with `rows x cols` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Table {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Table { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Table::new(rows, cols, vec![0.0; rows * cols])
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    fn check_stochastic_columns(&self, name: &str) -> Result<()> {
        if self.data.len() != self.rows * self.cols {
            return Err(validation(format!("{name}: data length mismatch")));
        }
        for c in 0..self.cols {
            let mut sum = 0.0;
            for r in 0..self.rows {
                let v = self.at(r, c);
                if !(v.is_finite() && v >= 0.0) {
                    return Err(validation(format!("{name}[{r},{c}] = {v} is not a probability")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(validation(format!("{name} column {c} sums to {sum}")));
            }
        }
        Ok(())
    }

    fn normalize_columns(&mut self) {
        for c in 0..self.cols {
            let sum: f64 = (0..self.rows).map(|r| self.at(r, c)).sum();
            for r in 0..self.rows {
                let v = self.at(r, c) / sum;
                self.set(r, c, v);
            }
        }
    }
}

/// Tabular instance. Column `x` of a conditional table `T[y, x]` is the
/// distribution of `y` given `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteInstance {
    pub n_users: usize,
    pub n_pivots: usize,
    pub n_systems: usize,
    pub n_images: usize,
    /// `f(i, u)`: `n_images x n_users`, entries in `[0, 1]`.
    pub satisfaction: Table,
    /// `G(i | s)`: `n_images x n_systems`.
    pub generation: Table,
    /// `E(v | u)`: `n_pivots x n_users`.
    pub encoder: Table,
    /// `D(s | v)`: `n_systems x n_pivots`.
    pub decoder: Table,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    /// Full objective with the pivot marginalized.
    pub objective: f64,
    /// Objective restricted to pivot == image.
    pub lower_bound: f64,
    /// `E[f(i,u) E(i|u)]`
    pub preference_term: f64,
    /// `E[G(i|s) D(s|i)]`
    pub decoding_term: f64,
    pub covariance: f64,
}

impl DiscreteInstance {
    pub fn validate(&self) -> Result<()> {
        let shapes = [
            ("satisfaction", &self.satisfaction, self.n_images, self.n_users),
            ("generation", &self.generation, self.n_images, self.n_systems),
            ("encoder", &self.encoder, self.n_pivots, self.n_users),
            ("decoder", &self.decoder, self.n_systems, self.n_pivots),
        ];
        for (name, t, r, c) in shapes {
            if (t.rows, t.cols) != (r, c) || t.data.len() != r * c {
                return Err(validation(format!("{name} has shape {}x{}, expected {r}x{c}", t.rows, t.cols)));
            }
        }
        if self.n_users == 0 || self.n_pivots == 0 || self.n_systems == 0 || self.n_images == 0 {
            return Err(validation("index sets must be nonempty"));
        }
        if self.satisfaction.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(validation("satisfaction entries must lie in [0, 1]"));
        }
        self.generation.check_stochastic_columns("generation")?;
        self.encoder.check_stochastic_columns("encoder")?;
        self.decoder.check_stochastic_columns("decoder")?;
        Ok(())
    }

    /// Seeded instance with `V = I`; sizes drawn from `2..=5`.
    pub fn random(seed: u64, index: u64) -> Self {
        let mut rng = seed::rng(seed, "discrete-instance", index);
        let nu = rng.random_range(2..=5);
        let ns = rng.random_range(2..=5);
        let ni = rng.random_range(2..=5);
        let mut fill = |rows: usize, cols: usize, normalize: bool| {
            let mut t = Table::new(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>()).collect());
            if normalize {
                t.normalize_columns();
            }
            t
        };
        DiscreteInstance {
            n_users: nu,
            n_pivots: ni,
            n_systems: ns,
            n_images: ni,
            satisfaction: fill(ni, nu, false),
            generation: fill(ni, ns, true),
            encoder: fill(ni, nu, true),
            decoder: fill(ns, ni, true),
        }
    }

    /// Instance where `G` and `D` are mutually inverse permutations, so only
    /// the `v = i` terms survive.
    pub fn one_to_one(seed: u64, index: u64, n: usize) -> Self {
        let mut rng = seed::rng(seed, "one-to-one-instance", index);
        let nu = rng.random_range(2..=4);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut generation = Table::zeros(n, n);
        let mut decoder = Table::zeros(n, n);
        for (s, &i) in perm.iter().enumerate() {
            generation.set(i, s, 1.0);
            decoder.set(s, i, 1.0);
        }
        let satisfaction = Table::new(n, nu, (0..n * nu).map(|_| rng.random::<f64>()).collect());
        let mut encoder = Table::new(n, nu, (0..n * nu).map(|_| rng.random::<f64>()).collect());
        encoder.normalize_columns();
        DiscreteInstance {
            n_users: nu,
            n_pivots: n,
            n_systems: n,
            n_images: n,
            satisfaction,
            generation,
            encoder,
            decoder,
        }
    }

    fn check_user(&self, u: usize) -> Result<()> {
        if u >= self.n_users {
            return Err(invalid(format!("user index {u} out of range ({})", self.n_users)));
        }
        Ok(())
    }

    /// `R(s|u) = Σ_v D(s|v) E(v|u)`
    pub fn pivot_marginal(&self, u: usize) -> Result<Vec<f64>> {
        self.validate()?;
        self.check_user(u)?;
        let encoder_col: Vec<f64> = (0..self.n_pivots).map(|v| self.encoder.at(v, u)).collect();
        Ok((0..self.n_systems)
            .map(|s| {
                (0..self.n_pivots)
                    .map(|v| self.decoder.at(s, v) * encoder_col[v])
                    .sum()
            })
            .collect())
    }

    /// Two-stage argmax `(v*, s*)`; lowest index wins ties.
    pub fn argmax_chain(&self, u: usize) -> Result<(usize, usize)> {
        self.validate()?;
        self.check_user(u)?;
        let v_star = argmax((0..self.n_pivots).map(|v| self.encoder.at(v, u)));
        let s_star = argmax((0..self.n_systems).map(|s| self.decoder.at(s, v_star)));
        Ok((v_star, s_star))
    }

    /// Objective, bound and its decomposition by exact summation.
    pub fn objective_value(&self) -> Result<ObjectiveTerms> {
        self.validate()?;
        if self.n_pivots != self.n_images {
            return Err(invalid(format!(
                "bound needs the pivot set identified with the image set ({} pivots vs {} images)",
                self.n_pivots, self.n_images
            )));
        }
        let (nu, ns, ni) = (self.n_users, self.n_systems, self.n_images);
        let measure = 1.0 / (nu * ns * ni) as f64;
        let x = |u: usize, i: usize| self.satisfaction.at(i, u) * self.encoder.at(i, u);
        let y = |s: usize, i: usize| self.generation.at(i, s) * self.decoder.at(s, i);

        let mut objective = 0.0;
        let mut lower_bound = 0.0;
        let mut ex = 0.0;
        let mut ey = 0.0;
        for u in 0..nu {
            for s in 0..ns {
                for i in 0..ni {
                    let routed: f64 = (0..self.n_pivots)
                        .map(|v| self.decoder.at(s, v) * self.encoder.at(v, u))
                        .sum();
                    let fg = self.satisfaction.at(i, u) * self.generation.at(i, s);
                    objective += fg * routed;
                    lower_bound += x(u, i) * y(s, i);
                    ex += x(u, i);
                    ey += y(s, i);
                }
            }
        }
        objective *= measure;
        lower_bound *= measure;
        ex *= measure;
        ey *= measure;

        let mut covariance = 0.0;
        for u in 0..nu {
            for s in 0..ns {
                for i in 0..ni {
                    covariance += (x(u, i) - ex) * (y(s, i) - ey);
                }
            }
        }
        covariance *= measure;

        Ok(ObjectiveTerms {
            objective,
            lower_bound,
            preference_term: ex,
            decoding_term: ey,
            covariance,
        })
    }

    /// Copy with every satisfaction entry multiplied by `lambda`. Keep
    /// `lambda <= 1` or the copy fails validation.
    pub fn scale_satisfaction(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        out.satisfaction.data.iter_mut().for_each(|v| *v *= lambda);
        out
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Summary of a seeded sweep over random instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub instances: usize,
    pub max_marginal_error: f64,
    pub max_marginal_mass_error: f64,
    pub max_identity_error: f64,
    pub bound_violations: usize,
    pub max_one_to_one_gap: f64,
    /// Fraction of instances where the argmax chain agrees with the argmax of
    /// the marginal. Reported only; the chain is an approximation.
    pub argmax_agreement: f64,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.max_marginal_error <= 1e-12
            && self.max_marginal_mass_error <= 1e-12
            && self.max_identity_error <= 1e-12
            && self.bound_violations == 0
            && self.max_one_to_one_gap <= 1e-12
    }
}

/// Run the exact-algebra checks over `instances` seeded random instances.
pub fn sweep(seed: u64, instances: usize) -> Result<SweepReport> {
    let rows = crate::exec::try_map(&(0..instances as u64).collect::<Vec<_>>(), |&k| -> Result<[f64; 6]> {
        let inst = DiscreteInstance::random(seed, k);
        let mut marginal_err: f64 = 0.0;
        let mut mass_err: f64 = 0.0;
        let mut agree = 0.0;
        for u in 0..inst.n_users {
            let r = inst.pivot_marginal(u)?;
            mass_err = mass_err.max((r.iter().sum::<f64>() - 1.0).abs());
            // Independent route: accumulate the marginal pivot by pivot.
            let mut direct = vec![0.0; inst.n_systems];
            for v in 0..inst.n_pivots {
                for (s, d) in direct.iter_mut().enumerate() {
                    *d += inst.decoder.data[s * inst.n_pivots + v] * inst.encoder.data[v * inst.n_users + u];
                }
            }
            for (a, b) in r.iter().zip(&direct) {
                marginal_err = marginal_err.max((a - b).abs());
            }
            let (_, s_star) = inst.argmax_chain(u)?;
            if s_star == argmax(r.iter().copied()) {
                agree += 1.0;
            }
        }
        let t = inst.objective_value()?;
        let identity = (t.lower_bound - (t.preference_term * t.decoding_term + t.covariance)).abs();
        let violation = if t.objective + 1e-15 < t.lower_bound { 1.0 } else { 0.0 };
        let oto = DiscreteInstance::one_to_one(seed, k, 2 + (k as usize % 4)).objective_value()?;
        let gap = (oto.objective - oto.lower_bound).abs();
        Ok([marginal_err, mass_err, identity, violation, gap, agree / inst.n_users as f64])
    })?;
    let fold_max = |idx: usize| rows.iter().map(|r| r[idx]).fold(0.0, f64::max);
    Ok(SweepReport {
        instances,
        max_marginal_error: fold_max(0),
        max_marginal_mass_error: fold_max(1),
        max_identity_error: fold_max(2),
        bound_violations: rows.iter().filter(|r| r[3] > 0.0).count(),
        max_one_to_one_gap: fold_max(4),
        argmax_agreement: rows.iter().map(|r| r[5]).sum::<f64>() / instances.max(1) as f64,
    })
}
