//! Mutual-information estimation between auxiliary targets and the
//! primary target, and allocation of the seventeen loss weights.
//!
//! Continuous pairs use the k-nearest-neighbor KSG estimator (variant 1);
//! discrete/continuous pairs use the Ross variant built on within-class
//! neighbor radii; two discrete columns use the exact plug-in estimate
//! over the joint count table. All estimates are in nats and clipped at
//! zero from below.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aux_targets::{AuxTargetTable, N_AUX};
use crate::corpus::{Corpus, Label, Partition, TaskKind};
use crate::error::{Error, Result};

/// Default neighbor count for the k-NN estimators.
pub const DEFAULT_K: usize = 3;

// ── Digamma ──────────────────────────────────────────────────────────

/// Digamma function for positive arguments: upward recurrence into the
/// asymptotic region, then the standard series in 1/x^2.
pub fn digamma(mut x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut acc = 0.0;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + x.ln() - 0.5 * inv
        - inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 / 240.0)))
}

// ── KSG continuous-continuous ────────────────────────────────────────

/// Deterministic tie-breaking jitter: 1e-10 times the value's ordinal
/// rank within its own axis.
fn jitter(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut out = values.to_vec();
    for (rank, &idx) in order.iter().enumerate() {
        out[idx] += 1e-10 * rank as f64;
    }
    out
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Mi(format!("non-finite {} sample", what)));
    }
    Ok(())
}

/// KSG estimator #1 for two continuous variables, in nats.
///
/// For each point, the Chebyshev distance to its k-th joint neighbor
/// sets a radius; n_x and n_y count the points strictly inside that
/// radius per axis, and MI = psi(k) + psi(N) - mean(psi(n_x+1) +
/// psi(n_y+1)).
pub fn estimate_mi_cc(x: &[f64], y: &[f64], k: usize) -> Result<f64> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::Mi(format!("sample lengths differ: {} vs {}", n, y.len())));
    }
    if k < 1 || n <= k {
        return Err(Error::Mi(format!("need N > k >= 1, got N={} k={}", n, k)));
    }
    check_finite(x, "x")?;
    check_finite(y, "y")?;
    let x = jitter(x);
    let y = jitter(y);

    let mut psi_sum = 0.0;
    let mut dists = vec![0.0f64; n];
    for i in 0..n {
        for j in 0..n {
            let dx = (x[j] - x[i]).abs();
            let dy = (y[j] - y[i]).abs();
            dists[j] = dx.max(dy);
        }
        dists[i] = f64::INFINITY; // exclude self
        let eps = kth_smallest(&mut dists.clone(), k);
        let mut n_x = 0usize;
        let mut n_y = 0usize;
        for j in 0..n {
            if j == i {
                continue;
            }
            if (x[j] - x[i]).abs() < eps {
                n_x += 1;
            }
            if (y[j] - y[i]).abs() < eps {
                n_y += 1;
            }
        }
        psi_sum += digamma(n_x as f64 + 1.0) + digamma(n_y as f64 + 1.0);
    }
    let mi = digamma(k as f64) + digamma(n as f64) - psi_sum / n as f64;
    if !mi.is_finite() {
        return Err(Error::Mi("non-finite estimate".into()));
    }
    Ok(mi.max(0.0))
}

fn kth_smallest(values: &mut [f64], k: usize) -> f64 {
    let (_, v, _) = values.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
    *v
}

// ── Ross discrete-continuous ─────────────────────────────────────────

/// Ross estimator for a continuous variable against a discrete one, in
/// nats. The k-th nearest same-class neighbor sets each point's radius;
/// m counts the points of any class strictly inside it, and
/// MI = psi(N) + psi(k) - mean(psi(N_class)) - mean(psi(m+1)).
pub fn estimate_mi_dc(x: &[f64], classes: &[u8], k: usize) -> Result<f64> {
    let n = x.len();
    if classes.len() != n {
        return Err(Error::Mi(format!("sample lengths differ: {} vs {}", n, classes.len())));
    }
    if k < 1 || n <= k {
        return Err(Error::Mi(format!("need N > k >= 1, got N={} k={}", n, k)));
    }
    check_finite(x, "x")?;
    let x = jitter(x);

    let mut class_counts = std::collections::BTreeMap::<u8, usize>::new();
    for &c in classes {
        *class_counts.entry(c).or_insert(0) += 1;
    }
    for (&c, &count) in &class_counts {
        if count <= k {
            return Err(Error::Mi(format!(
                "class {} has {} samples, need more than k={}",
                c, count, k
            )));
        }
    }

    let mut psi_m = 0.0;
    let mut psi_nc = 0.0;
    let mut same_class = Vec::new();
    for i in 0..n {
        same_class.clear();
        for j in 0..n {
            if j != i && classes[j] == classes[i] {
                same_class.push((x[j] - x[i]).abs());
            }
        }
        let radius = kth_smallest(&mut same_class, k);
        let mut m = 0usize;
        for j in 0..n {
            if j != i && (x[j] - x[i]).abs() < radius {
                m += 1;
            }
        }
        psi_m += digamma(m as f64 + 1.0);
        psi_nc += digamma(class_counts[&classes[i]] as f64);
    }
    let mi = digamma(n as f64) + digamma(k as f64) - psi_nc / n as f64 - psi_m / n as f64;
    if !mi.is_finite() {
        return Err(Error::Mi("non-finite estimate".into()));
    }
    Ok(mi.max(0.0))
}

// ── Exact discrete-discrete ──────────────────────────────────────────

/// Plug-in mutual information over the joint count table of two
/// discrete variables, in nats.
pub fn discrete_mi(a: &[u8], b: &[u8]) -> Result<f64> {
    let n = a.len();
    if b.len() != n || n == 0 {
        return Err(Error::Mi("discrete samples empty or mismatched".into()));
    }
    let mut joint = std::collections::BTreeMap::<(u8, u8), f64>::new();
    let mut pa = std::collections::BTreeMap::<u8, f64>::new();
    let mut pb = std::collections::BTreeMap::<u8, f64>::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0.0) += 1.0;
        *pa.entry(x).or_insert(0.0) += 1.0;
        *pb.entry(y).or_insert(0.0) += 1.0;
    }
    let n = n as f64;
    let mut mi = 0.0;
    for (&(x, y), &nxy) in &joint {
        let pxy = nxy / n;
        mi += pxy * (pxy / (pa[&x] / n * pb[&y] / n)).ln();
    }
    Ok(mi.max(0.0))
}

// ── MI vector over the auxiliary table ───────────────────────────────

/// Mutual information of each auxiliary column with the primary target,
/// estimated on the train partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiVector(pub [f64; N_AUX]);

impl MiVector {
    pub fn uniform() -> Self {
        MiVector([1.0; N_AUX])
    }
}

pub fn mi_vector(corpus: &Corpus, table: &AuxTargetTable, k: usize) -> Result<MiVector> {
    let train = corpus.partition_turns(Partition::Train);
    if train.is_empty() {
        return Err(Error::Mi("no train partition".into()));
    }
    let rows: Vec<&[Label; N_AUX]> = train
        .iter()
        .map(|&r| {
            let t = corpus.turn(r);
            table.row(&t.conversation_id, t.turn_index).ok_or_else(|| {
                Error::Mi(format!(
                    "auxiliary table is missing ({}, {})",
                    t.conversation_id, t.turn_index
                ))
            })
        })
        .collect::<Result<_>>()?;

    let mut m = [0.0f64; N_AUX];
    match corpus.task_kind {
        TaskKind::Classification { .. } => {
            let primary: Vec<u8> = train
                .iter()
                .map(|&r| corpus.turn(r).label.as_class())
                .collect::<Result<_>>()?;
            for col in 0..N_AUX {
                m[col] = match rows[0][col] {
                    Label::Real(_) => {
                        let xs: Vec<f64> = rows
                            .iter()
                            .map(|row| row[col].as_real().map(|v| v as f64))
                            .collect::<Result<_>>()?;
                        estimate_mi_dc(&xs, &primary, k)?
                    }
                    Label::Class(_) => {
                        let xs: Vec<u8> =
                            rows.iter().map(|row| row[col].as_class()).collect::<Result<_>>()?;
                        discrete_mi(&xs, &primary)?
                    }
                };
            }
        }
        TaskKind::Regression { .. } => {
            let primary: Vec<f64> = train
                .iter()
                .map(|&r| corpus.turn(r).label.as_real().map(|v| v as f64))
                .collect::<Result<_>>()?;
            for col in 0..N_AUX {
                let xs: Vec<f64> = rows
                    .iter()
                    .map(|row| row[col].as_real().map(|v| v as f64))
                    .collect::<Result<_>>()?;
                m[col] = estimate_mi_cc(&xs, &primary, k)?;
            }
        }
    }
    Ok(MiVector(m))
}

// ── Weight allocation ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Random,
    LinearMi,
    SoftmaxMi,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Random, Scheme::LinearMi, Scheme::SoftmaxMi];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Random => "random",
            Scheme::LinearMi => "linear-mi",
            Scheme::SoftmaxMi => "softmax-mi",
        }
    }
}

/// The seventeen loss weights: a majority primary weight plus sixteen
/// nonnegative auxiliary weights summing to the remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub primary: f64,
    pub aux: [f64; N_AUX],
    pub scheme: Scheme,
}

impl WeightVector {
    pub fn sum(&self) -> f64 {
        self.primary + self.aux.iter().sum::<f64>()
    }

    /// Zero the masked auxiliary entries and renormalize so the vector
    /// sums to one again (the removed mass flows to the kept entries,
    /// mostly the primary).
    pub fn with_zeroed(&self, zero_mask: &[bool; N_AUX]) -> WeightVector {
        let mut aux = self.aux;
        for (w, &z) in aux.iter_mut().zip(zero_mask) {
            if z {
                *w = 0.0;
            }
        }
        let total = self.primary + aux.iter().sum::<f64>();
        let mut out = WeightVector { primary: self.primary / total, aux, scheme: self.scheme };
        for w in out.aux.iter_mut() {
            *w /= total;
        }
        out
    }

    /// Weights as one 17-vector: primary first, then the aux columns.
    pub fn to_vec17(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(17);
        v.push(self.primary);
        v.extend_from_slice(&self.aux);
        v
    }
}

/// Distribute 1 - w_primary over the sixteen auxiliary tasks.
pub fn allocate_weights<R: Rng>(
    w_primary: f64,
    m: &MiVector,
    scheme: Scheme,
    rng: &mut R,
) -> Result<WeightVector> {
    if !(0.50..=0.99).contains(&w_primary) {
        return Err(Error::Config(format!("w_primary {} outside [0.50, 0.99]", w_primary)));
    }
    if m.0.iter().any(|&v| v < 0.0) {
        return Err(Error::Mi("MI vector entries must be nonnegative".into()));
    }
    let remaining = 1.0 - w_primary;
    let shares: [f64; N_AUX] = match scheme {
        Scheme::Random => {
            let mut g = [0.0f64; N_AUX];
            for v in g.iter_mut() {
                *v = rng.random::<f64>();
            }
            let total: f64 = g.iter().sum();
            if total <= 0.0 {
                return Err(Error::Mi("degenerate random draw".into()));
            }
            g.map(|v| v / total)
        }
        Scheme::LinearMi => {
            let total: f64 = m.0.iter().sum();
            if total <= 0.0 {
                return Err(Error::Mi(
                    "all MI estimates are zero; linear normalization undefined".into(),
                ));
            }
            m.0.map(|v| v / total)
        }
        Scheme::SoftmaxMi => {
            let max = m.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps = m.0.map(|v| (v - max).exp());
            let total: f64 = exps.iter().sum();
            exps.map(|v| v / total)
        }
    };
    Ok(WeightVector { primary: w_primary, aux: shares.map(|s| s * remaining), scheme })
}
