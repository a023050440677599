//! Information-Bottleneck machinery over epsilon-noise regulated activations.
//!
//! Mutual information of a deterministic layer is ill defined; adding an
//! isotropic Gaussian noise of scale `sigma_eps` to the activations makes it
//! finite and, whenever triples of points rarely come within a few noise
//! lengths of one another, turns it into a pairwise quantity. Everything here
//! is built from the entropy of an equal-weight mixture of two d-dimensional
//! Gaussians `N(0, s^2 I)` and `N(Delta e1, s^2 I)`:
//!
//!   H(Delta; s) = H1(Delta, s) + (d - 1) * (1/2) ln(2 pi e s^2)
//!
//! which reduces to a one-dimensional quadrature along the separation axis
//! because the mixture density factorizes across the orthogonal directions.
//! The pairwise interaction is the entropy deficit relative to two far
//! separated components,
//!
//!   dS(r) = H1(r, s) - H1(0, s) - ln 2,     dS in [-ln 2, 0],
//!
//! independent of the embedding dimension. The estimates implemented here are
//!
//!   I(T+eps : X) = ln N + (1/N) sum_{n != m} dS(|h_n - h_m|)
//!   I(T+eps : Y) = ln N + (2/N) sum_{unordered opposite-label pairs} dS
//!   L_IB(beta)   = sum_{n != m} [beta (1 - l_n l_m) - 1] dS(|h_n - h_m|)
//!
//! with binary labels encoded as l_n in {-1, +1} for the product, so the
//! bracket is -1 on same-label pairs and 2 beta - 1 on opposite ones. Under
//! this sign convention the Information Bottleneck objective is minimized by
//! minimizing `-ib_loss`: collapsing a same-label pair raises `ib_loss` by
//! 2 ln 2 while collapsing an opposite-label pair lowers it by 2(2 beta - 1)
//! ln 2, so droplet formation is rewarded and label-destroying collapse is
//! penalized.
//!
//! Both mutual-information estimates assume the pairwise regime. The module
//! counts triples of points with all three mutual distances below
//! `3 sigma_eps` and reports the count alongside each estimate rather than
//! attempting any correction; a nonzero count means the formulas above are
//! applied outside their regime of validity.

use gp_core::LabeledActivations;
use std::collections::HashMap;

/// Distances beyond this many noise lengths contribute an entropy deficit
/// below 1e-15 nats and are treated as exactly zero.
const FAR_CUTOFF_SIGMAS: f64 = 12.0;

#[derive(Debug, thiserror::Error)]
pub enum IbError {
    #[error("invalid mixture entropy spec: {0}")]
    InvalidSpec(String),
    #[error("negative or non-finite pair distance")]
    InvalidDistance,
    #[error("population selects no pairs")]
    EmptyPopulation,
    #[error("operation requires binary labels, found {0} classes")]
    NonBinaryLabels(usize),
    #[error("histogram needs at least one bin")]
    NoBins,
}

/// Parameters of the two-Gaussian mixture entropy.
///
/// `dim` is the activation-space dimension d, `sigma_eps` the regulator noise
/// scale, and `nodes` the starting trapezoid resolution of the reduced
/// one-dimensional quadrature. The quadrature doubles its node count until
/// successive refinements agree to 1e-9 nats, so `nodes` only sets where that
/// search begins.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureEntropySpec {
    pub dim: usize,
    pub sigma_eps: f64,
    pub nodes: usize,
}

impl MixtureEntropySpec {
    pub fn new(dim: usize, sigma_eps: f64) -> Self {
        Self {
            dim,
            sigma_eps,
            nodes: 4096,
        }
    }

    pub fn validate(&self) -> Result<(), IbError> {
        if self.dim == 0 {
            return Err(IbError::InvalidSpec("dim must be at least 1".into()));
        }
        if !(self.sigma_eps > 0.0 && self.sigma_eps.is_finite()) {
            return Err(IbError::InvalidSpec(format!(
                "sigma_eps must be positive, got {}",
                self.sigma_eps
            )));
        }
        if self.nodes < 16 {
            return Err(IbError::InvalidSpec(
                "quadrature needs at least 16 nodes".into(),
            ));
        }
        Ok(())
    }
}

/// Which pairs a distance histogram ranges over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Population {
    AllPairs,
    OppositeLabel,
}

/// Histogram of pairwise activation distances.
///
/// `edges` has one more entry than `mass`. All-pairs mass is normalized by
/// 1/(N(N-1)) per ordered pair and always sums to 1; opposite-label mass is
/// normalized by 4/N^2 per unordered pair, which sums to 1 exactly when the
/// two classes are balanced.
#[derive(Clone, Debug)]
pub struct PairDistribution {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
    pub population: Population,
}

impl PairDistribution {
    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Renders the histogram as `bin_lo,bin_hi,mass` CSV lines for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,mass\n");
        for (i, m) in self.mass.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], m));
        }
        out
    }
}

/// A mutual-information estimate together with its validity evidence.
///
/// `close_triples` counts point triples whose three mutual distances all fall
/// below `3 sigma_eps`; the pairwise formulas assume such triples are absent,
/// so a nonzero count flags the estimate rather than correcting it.
#[derive(Clone, Copy, Debug)]
pub struct MiEstimate {
    pub value: f64,
    pub close_triples: usize,
}

impl MiEstimate {
    pub fn pairwise_regime_valid(&self) -> bool {
        self.close_triples == 0
    }
}

fn gaussian_entropy_1d(sigma: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln()
}

fn trapezoid_mixture_entropy(sigma: f64, delta: f64, nodes: usize) -> f64 {
    let half = 0.5 * delta;
    let lo = -half - 10.0 * sigma;
    let hi = half + 10.0 * sigma;
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let step = (hi - lo) / (nodes as f64 - 1.0);
    let mut acc = 0.0;
    for i in 0..nodes {
        let x = lo + step * i as f64;
        let za = (x - half) / sigma;
        let zb = (x + half) / sigma;
        let rho = 0.5 * norm * ((-0.5 * za * za).exp() + (-0.5 * zb * zb).exp());
        let f = if rho > 0.0 { -rho * rho.ln() } else { 0.0 };
        let w = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
        acc += w * f;
    }
    acc * step
}

fn one_dim_mixture_entropy(sigma: f64, delta: f64, start_nodes: usize) -> f64 {
    let mut nodes = start_nodes.max(16);
    let mut value = trapezoid_mixture_entropy(sigma, delta, nodes);
    for _ in 0..10 {
        nodes *= 2;
        let refined = trapezoid_mixture_entropy(sigma, delta, nodes);
        let done = (refined - value).abs() < 1e-9;
        value = refined;
        if done {
            break;
        }
    }
    let lo = gaussian_entropy_1d(sigma);
    value.clamp(lo, lo + std::f64::consts::LN_2)
}

/// Entropy of the equal-weight mixture of two d-dimensional Gaussians with
/// variance `sigma_eps^2` whose centers sit `delta` apart.
///
/// The d - 1 directions orthogonal to the separation axis contribute their
/// Gaussian entropies additively; only the axis itself needs quadrature. The
/// result is clamped into the exact bracket `[H(0), H(0) + ln 2]`.
pub fn mixture_entropy(spec: &MixtureEntropySpec, delta: f64) -> Result<f64, IbError> {
    spec.validate()?;
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(IbError::InvalidDistance);
    }
    let h1 = one_dim_mixture_entropy(spec.sigma_eps, delta, spec.nodes);
    Ok(h1 + (spec.dim as f64 - 1.0) * gaussian_entropy_1d(spec.sigma_eps))
}

/// Entropy deficit dS(r) = H(r) - H(infinity), a nonpositive interaction that
/// vanishes beyond a dozen noise lengths and reaches -ln 2 at coincidence.
///
/// Independent of `spec.dim`: the orthogonal Gaussian entropies cancel in the
/// difference.
pub fn delta_s(spec: &MixtureEntropySpec, r: f64) -> Result<f64, IbError> {
    spec.validate()?;
    if !(r >= 0.0 && r.is_finite()) {
        return Err(IbError::InvalidDistance);
    }
    if r >= FAR_CUTOFF_SIGMAS * spec.sigma_eps {
        return Ok(0.0);
    }
    let h1 = one_dim_mixture_entropy(spec.sigma_eps, r, spec.nodes);
    Ok(h1 - gaussian_entropy_1d(spec.sigma_eps) - std::f64::consts::LN_2)
}

fn pair_distance(data: &LabeledActivations, n: usize, m: usize) -> f64 {
    (data.h.row(n) - data.h.row(m)).norm()
}

/// Caches the entropy deficit per distinct distance so duplicated distances,
/// common in structured datasets, cost one quadrature each.
struct DeltaSCache<'a> {
    spec: &'a MixtureEntropySpec,
    memo: HashMap<u64, f64>,
}

impl<'a> DeltaSCache<'a> {
    fn new(spec: &'a MixtureEntropySpec) -> Self {
        Self {
            spec,
            memo: HashMap::new(),
        }
    }

    fn get(&mut self, r: f64) -> Result<f64, IbError> {
        if let Some(v) = self.memo.get(&r.to_bits()) {
            return Ok(*v);
        }
        let v = delta_s(self.spec, r)?;
        self.memo.insert(r.to_bits(), v);
        Ok(v)
    }
}

/// Counts triples of rows whose three mutual distances are all below
/// `radius`. Triangle enumeration runs on the close-pair graph, so the cost
/// beyond the O(N^2) distance pass scales with how many close pairs exist.
pub fn close_triple_count(data: &LabeledActivations, radius: f64) -> usize {
    let n = data.len();
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if pair_distance(data, i, j) < radius {
                neighbors[i].push(j);
            }
        }
    }
    let mut count = 0;
    for i in 0..n {
        for (a, &j) in neighbors[i].iter().enumerate() {
            for &k in &neighbors[i][a + 1..] {
                if neighbors[j].binary_search(&k).is_ok() {
                    count += 1;
                }
            }
        }
    }
    count
}

fn binary_classes(data: &LabeledActivations) -> Result<(usize, usize), IbError> {
    let mut classes: Vec<usize> = data.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    match classes.len() {
        1 => Ok((classes[0], classes[0])),
        2 => Ok((classes[0], classes[1])),
        k => Err(IbError::NonBinaryLabels(k)),
    }
}

/// Histogram of pairwise distances over the selected population.
///
/// Bins divide `[0, max distance]` evenly, with the top edge nudged so the
/// largest distance lands inside the final bin.
pub fn pdf(
    data: &LabeledActivations,
    population: Population,
    bins: usize,
) -> Result<PairDistribution, IbError> {
    if bins == 0 {
        return Err(IbError::NoBins);
    }
    let n = data.len();
    let mut distances = Vec::new();
    let mut weights = Vec::new();
    match population {
        Population::AllPairs => {
            if n < 2 {
                return Err(IbError::EmptyPopulation);
            }
            let w = 2.0 / (n as f64 * (n as f64 - 1.0));
            for i in 0..n {
                for j in (i + 1)..n {
                    distances.push(pair_distance(data, i, j));
                    weights.push(w);
                }
            }
        }
        Population::OppositeLabel => {
            let (lo, hi) = binary_classes(data)?;
            let w = 4.0 / (n as f64 * n as f64);
            for i in 0..n {
                for j in (i + 1)..n {
                    let opposite = data.labels[i] != data.labels[j];
                    if opposite {
                        distances.push(pair_distance(data, i, j));
                        weights.push(w);
                    }
                }
            }
            if distances.is_empty() || lo == hi {
                return Err(IbError::EmptyPopulation);
            }
        }
    }
    let max = distances.iter().cloned().fold(0.0_f64, f64::max);
    let top = if max > 0.0 { max * (1.0 + 1e-9) } else { 1.0 };
    let width = top / bins as f64;
    let mut edges = Vec::with_capacity(bins + 1);
    for i in 0..=bins {
        edges.push(width * i as f64);
    }
    let mut mass = vec![0.0; bins];
    for (d, w) in distances.iter().zip(&weights) {
        let idx = ((d / width) as usize).min(bins - 1);
        mass[idx] += w;
    }
    Ok(PairDistribution {
        edges,
        mass,
        population,
    })
}

/// Estimate of I(T+eps : X), the information the noisy activations retain
/// about which input they came from.
///
/// Evaluates ln N + (1/N) sum over ordered pairs of the entropy deficit, the
/// exact pair summation behind the PDF-integral form. Far separated datasets
/// return ln N; a fully collapsed pair of points returns ln 2 - ln 2 = 0.
pub fn mutual_info_input(
    data: &LabeledActivations,
    spec: &MixtureEntropySpec,
) -> Result<MiEstimate, IbError> {
    spec.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(IbError::EmptyPopulation);
    }
    let mut cache = DeltaSCache::new(spec);
    let mut acc = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            acc += 2.0 * cache.get(pair_distance(data, i, j))?;
        }
    }
    Ok(MiEstimate {
        value: (n as f64).ln() + acc / n as f64,
        close_triples: close_triple_count(data, 3.0 * spec.sigma_eps),
    })
}

/// Estimate of I(T+eps : Y) through the opposite-label pair distribution,
/// ln N + (2/N) sum over unordered opposite-label pairs of the entropy
/// deficit. Binary labels only.
pub fn mutual_info_label(
    data: &LabeledActivations,
    spec: &MixtureEntropySpec,
) -> Result<MiEstimate, IbError> {
    spec.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(IbError::EmptyPopulation);
    }
    binary_classes(data)?;
    let mut cache = DeltaSCache::new(spec);
    let mut acc = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            if data.labels[i] != data.labels[j] {
                acc += cache.get(pair_distance(data, i, j))?;
            }
        }
    }
    Ok(MiEstimate {
        value: (n as f64).ln() + 2.0 * acc / n as f64,
        close_triples: close_triple_count(data, 3.0 * spec.sigma_eps),
    })
}

/// The pairwise Information-Bottleneck loss
/// sum over ordered pairs n != m of [beta (1 - l_n l_m) - 1] dS(|h_n - h_m|)
/// with labels encoded +-1, so the bracket is -1 within a class and
/// 2 beta - 1 across classes.
///
/// Depends on the data only through pairwise distances and the label Gram.
/// See the module docs for the minimization sense.
pub fn ib_loss(
    data: &LabeledActivations,
    spec: &MixtureEntropySpec,
    beta: f64,
) -> Result<f64, IbError> {
    spec.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(IbError::EmptyPopulation);
    }
    binary_classes(data)?;
    let mut cache = DeltaSCache::new(spec);
    let mut acc = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let product = if data.labels[i] == data.labels[j] {
                1.0
            } else {
                -1.0
            };
            let bracket = beta * (1.0 - product) - 1.0;
            acc += 2.0 * bracket * cache.get(pair_distance(data, i, j))?;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn labeled(h: DMatrix<f64>, labels: Vec<usize>) -> LabeledActivations {
        let n = h.nrows();
        let targets = DMatrix::from_fn(n, 1, |r, _| if labels[r] == 0 { -1.0 } else { 1.0 });
        LabeledActivations::new(h, targets, labels).unwrap()
    }

    #[test]
    fn coincident_entropy_matches_single_gaussian() {
        for &(d, sigma) in &[(1usize, 0.3), (2, 1.0), (5, 2.0)] {
            let spec = MixtureEntropySpec::new(d, sigma);
            let h = mixture_entropy(&spec, 0.0).unwrap();
            let exact = d as f64 * gaussian_entropy_1d(sigma);
            assert!((h - exact).abs() < 1e-6, "d={d} sigma={sigma}");
        }
    }

    #[test]
    fn far_separated_entropy_gains_ln2() {
        for &sigma in &[0.5, 1.0, 3.0] {
            let spec = MixtureEntropySpec::new(3, sigma);
            let h0 = mixture_entropy(&spec, 0.0).unwrap();
            let h = mixture_entropy(&spec, 20.0 * sigma).unwrap();
            assert!((h - h0 - std::f64::consts::LN_2).abs() < 1e-6);
        }
    }

    #[test]
    fn entropy_monotone_and_bounded() {
        let spec = MixtureEntropySpec::new(2, 0.7);
        let h0 = mixture_entropy(&spec, 0.0).unwrap();
        let mut prev = h0;
        for i in 1..=32 {
            let delta = 0.25 * spec.sigma_eps * i as f64;
            let h = mixture_entropy(&spec, delta).unwrap();
            assert!(h >= prev - 5e-9, "entropy decreased at delta={delta}");
            assert!(h >= h0 - 1e-12);
            assert!(h <= h0 + std::f64::consts::LN_2 + 1e-12);
            prev = h;
        }
    }

    #[test]
    fn delta_s_is_dim_independent_and_bracketed() {
        let narrow = MixtureEntropySpec::new(1, 1.3);
        let wide = MixtureEntropySpec::new(7, 1.3);
        for i in 0..20 {
            let r = 0.6 * i as f64;
            let a = delta_s(&narrow, r).unwrap();
            let b = delta_s(&wide, r).unwrap();
            assert_eq!(a, b);
            assert!(a <= 0.0 && a >= -std::f64::consts::LN_2 - 1e-12);
        }
        assert!((delta_s(&narrow, 0.0).unwrap() + std::f64::consts::LN_2).abs() < 1e-9);
        assert_eq!(delta_s(&narrow, 40.0).unwrap(), 0.0);
    }

    #[test]
    fn quadrature_agrees_across_starting_resolutions() {
        let coarse = MixtureEntropySpec {
            dim: 2,
            sigma_eps: 1.0,
            nodes: 512,
        };
        let fine = MixtureEntropySpec {
            dim: 2,
            sigma_eps: 1.0,
            nodes: 4096,
        };
        for &delta in &[0.3, 1.0, 2.0, 5.0] {
            let a = mixture_entropy(&coarse, delta).unwrap();
            let b = mixture_entropy(&fine, delta).unwrap();
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn two_point_pdf_concentrates_in_one_bin() {
        let h = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 3.0, 4.0]);
        let data = labeled(h, vec![0, 1]);
        let dist = pdf(&data, Population::AllPairs, 10).unwrap();
        let hot: Vec<usize> = dist
            .mass
            .iter()
            .enumerate()
            .filter(|(_, m)| **m > 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(hot.len(), 1);
        let i = hot[0];
        assert!(dist.edges[i] <= 5.0 && 5.0 <= dist.edges[i + 1] * (1.0 + 1e-9));
        assert!((dist.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_square_corner_pdf_hand_masses() {
        let h = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let data = labeled(h, vec![0, 0, 1, 1]);
        let dist = pdf(&data, Population::AllPairs, 8).unwrap();
        let mut at_one = 0.0;
        let mut at_diag = 0.0;
        for (i, m) in dist.mass.iter().enumerate() {
            let mid = 0.5 * (dist.edges[i] + dist.edges[i + 1]);
            if (mid - 1.0).abs() < 0.2 {
                at_one += m;
            }
            if (mid - 2.0_f64.sqrt()).abs() < 0.2 {
                at_diag += m;
            }
        }
        assert!((at_one - 4.0 / 6.0).abs() < 1e-12);
        assert!((at_diag - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn opposite_label_mass_is_one_when_balanced() {
        let h = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let data = labeled(h, vec![0, 0, 1, 1]);
        let dist = pdf(&data, Population::OppositeLabel, 6).unwrap();
        assert!((dist.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_pair_input_mi_is_zero() {
        let h = DMatrix::from_row_slice(2, 3, &[0.4, -0.2, 1.0, 0.4, -0.2, 1.0]);
        let data = labeled(h, vec![0, 1]);
        let spec = MixtureEntropySpec::new(3, 0.5);
        let mi = mutual_info_input(&data, &spec).unwrap();
        assert!(mi.value.abs() < 1e-9);
    }

    #[test]
    fn far_separated_mi_reaches_log_n() {
        let n = 6;
        let spec = MixtureEntropySpec::new(1, 0.01);
        let h = DMatrix::from_fn(n, 1, |r, _| r as f64);
        let data = labeled(h, vec![0, 1, 0, 1, 0, 1]);
        let mi_x = mutual_info_input(&data, &spec).unwrap();
        let mi_y = mutual_info_label(&data, &spec).unwrap();
        assert!((mi_x.value - (n as f64).ln()).abs() < 1e-4);
        assert!((mi_y.value - (n as f64).ln()).abs() < 1e-4);
        assert!(mi_x.pairwise_regime_valid());
    }

    #[test]
    fn label_flip_preserves_label_mi() {
        let h = DMatrix::from_row_slice(5, 2, &[0.0, 0.0, 0.3, 0.1, 2.0, 1.0, -1.0, 0.4, 0.2, 0.9]);
        let spec = MixtureEntropySpec::new(2, 0.4);
        let data = labeled(h.clone(), vec![0, 1, 0, 1, 1]);
        let flipped = labeled(h, vec![1, 0, 1, 0, 0]);
        let a = mutual_info_label(&data, &spec).unwrap();
        let b = mutual_info_label(&flipped, &spec).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn same_label_coincident_pair_contributes_two_ln2() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let data = labeled(h, vec![0, 0]);
        let spec = MixtureEntropySpec::new(2, 0.3);
        let loss = ib_loss(&data, &spec, 3.0).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-8);
    }

    #[test]
    fn opposite_coincident_pair_at_beta_100() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let data = labeled(h, vec![0, 1]);
        let spec = MixtureEntropySpec::new(2, 0.3);
        let loss = ib_loss(&data, &spec, 100.0).unwrap();
        let expect = 2.0 * -199.0 * std::f64::consts::LN_2;
        assert!((loss - expect).abs() < 1e-8);
    }

    #[test]
    fn close_triples_counted_by_triangles() {
        let spec_radius = 0.9;
        let tight = DMatrix::from_row_slice(4, 1, &[0.0, 0.1, 0.2, 9.0]);
        let data = labeled(tight, vec![0, 0, 1, 1]);
        assert_eq!(close_triple_count(&data, spec_radius), 1);
        let all = DMatrix::from_row_slice(4, 1, &[0.0, 0.1, 0.2, 0.3]);
        let data_all = labeled(all, vec![0, 0, 1, 1]);
        assert_eq!(close_triple_count(&data_all, spec_radius), 4);
        let spread = DMatrix::from_row_slice(3, 1, &[0.0, 5.0, 10.0]);
        let data_far = labeled(spread, vec![0, 1, 0]);
        assert_eq!(close_triple_count(&data_far, spec_radius), 0);
    }

    #[test]
    fn close_pair_flags_estimate() {
        let h = DMatrix::from_row_slice(3, 1, &[0.0, 0.1, 0.2]);
        let data = labeled(h, vec![0, 1, 0]);
        let spec = MixtureEntropySpec::new(1, 0.5);
        let mi = mutual_info_input(&data, &spec).unwrap();
        assert_eq!(mi.close_triples, 1);
        assert!(!mi.pairwise_regime_valid());
    }

    #[test]
    fn non_binary_labels_are_rejected() {
        let h = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let targets = DMatrix::from_element(3, 1, 0.0);
        let data = LabeledActivations::new(h, targets, vec![0, 1, 2]).unwrap();
        let spec = MixtureEntropySpec::new(1, 0.5);
        assert!(matches!(
            mutual_info_label(&data, &spec),
            Err(IbError::NonBinaryLabels(3))
        ));
        assert!(matches!(
            ib_loss(&data, &spec, 2.0),
            Err(IbError::NonBinaryLabels(3))
        ));
    }
}
