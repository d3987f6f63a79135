//! Attribute-oriented mixture of adapters: per-attribute noisy top-K routing
//! over a shared adapter bank, scaled and added to a block's FFN output.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::nn::{join, Mlp};
use crate::numerics::{top_k_keep, Graph, Init, ParamId, ParamStore, RowMap, Rng, Tensor, Var};

pub const PROJ_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attr {
    Spa = 0,
    Spe = 1,
}

/// Per-token routing over the adapter bank. `weights` is `L × N_a` with
/// exactly K nonzero entries per row, located at `selected`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub weights: Tensor,
    pub selected: Vec<Vec<usize>>,
}

impl RoutingDecision {
    pub fn tokens(&self) -> usize {
        self.selected.len()
    }
}

#[derive(Debug, Clone)]
pub struct AoMoA {
    pub half: usize,
    pub bottleneck: usize,
    pub top_k: usize,
    pub w_down: ParamId,
    pub w_up: ParamId,
    pub gate: [ParamId; 2],
    pub noise: [ParamId; 2],
    pub adapters: Vec<Mlp>,
    pub s1: ParamId,
}

/// Graph handles of one AoMoA pass.
#[derive(Debug, Clone)]
pub struct AoMoAOut {
    pub out: Var,
    pub decisions: [RoutingDecision; 2],
}

impl AoMoA {
    /// `width` is the token width `2r`; the bottleneck is `r/4`.
    pub fn new(store: &mut ParamStore, name: &str, width: usize, adapters: usize, top_k: usize, rng: &mut Rng) -> Result<Self> {
        if width % 8 != 0 {
            return Err(Error::Profile(format!("AoMoA width {width} must be divisible by 8")));
        }
        if top_k == 0 || top_k > adapters {
            return Err(Error::InvalidArgument(format!("top-K {top_k} outside 1..={adapters}")));
        }
        let half = width / 2;
        let b = half / 4;
        let w_down = store.add_init(join(name, "w_down"), &[half, b], Init::Normal(PROJ_STD), rng);
        let w_up = store.add_init(join(name, "w_up"), &[b, half], Init::Normal(PROJ_STD), rng);
        let gate = [
            store.add_init(join(name, "gate.spa"), &[b, adapters], Init::Zeros, rng),
            store.add_init(join(name, "gate.spe"), &[b, adapters], Init::Zeros, rng),
        ];
        let noise = [
            store.add_init(join(name, "noise.spa"), &[b, adapters], Init::Zeros, rng),
            store.add_init(join(name, "noise.spe"), &[b, adapters], Init::Zeros, rng),
        ];
        let adapters = (0..adapters).map(|i| Mlp::new(store, &join(name, &format!("adapter.{i}")), (b, b, b), None, rng)).collect();
        let s1 = store.add_init(join(name, "s1"), &[1, width], Init::Zeros, rng);
        Ok(Self { half, bottleneck: b, top_k, w_down, w_up, gate, noise, adapters, s1 })
    }

    pub fn adapter_count(&self) -> usize {
        self.adapters.len()
    }

    /// Gate logits (plus softplus-scaled Gaussian noise when training), top-K
    /// masked, softmax over the kept entries. `x` is `n × r/4`.
    pub fn route(&self, g: &mut Graph, x: Var, attr: Attr, noise: Option<&mut Rng>) -> Result<(Var, RoutingDecision)> {
        let n_a = self.adapters.len();
        let wg = g.param(self.gate[attr as usize]);
        let mut h = g.matmul(x, wg)?;
        if let Some(rng) = noise {
            let wn = g.param(self.noise[attr as usize]);
            let raw = g.matmul(x, wn)?;
            let sd = g.softplus(raw)?;
            let n = g.rows(x);
            let eps = g.constant_raw(n, n_a, (0..n * n_a).map(|_| rng.normal()).collect())?;
            let scaled = g.mul(eps, sd)?;
            h = g.add(h, scaled)?;
        }
        let keep = top_k_keep(g.value(h), g.rows(h), n_a, self.top_k)?;
        let masked = g.top_k_mask(h, self.top_k)?;
        let w = g.softmax(masked)?;
        let selected = keep
            .chunks(n_a)
            .map(|row| row.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect())
            .collect();
        let decision = RoutingDecision { weights: g.tensor(w), selected };
        Ok((w, decision))
    }

    /// Weighted sum of the selected adapters' outputs. Each adapter runs
    /// only on the tokens routed to it.
    pub fn mix(&self, g: &mut Graph, x: Var, weights: Var, decision: &RoutingDecision) -> Result<Var> {
        let (n, dim) = g.dims(x);
        if decision.tokens() != n || g.dims(weights) != (n, self.adapters.len()) {
            return Err(Error::Shape(format!("routing for {} tokens, input has {n}", decision.tokens())));
        }
        let ones = g.constant_raw(1, dim, vec![1.0; dim])?;
        let mut total: Option<Var> = None;
        for (i, adapter) in self.adapters.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&t| decision.selected[t].contains(&i)).collect();
            if rows.is_empty() {
                continue;
            }
            let xi = g.gather_rows(x, &rows)?;
            let yi = adapter.forward(g, xi)?;
            let col = g.slice_cols(weights, i, i + 1)?;
            let wi = g.gather_rows(col, &rows)?;
            let wi = g.matmul(wi, ones)?;
            let yi = g.mul(yi, wi)?;
            let mut entries = vec![Vec::new(); n];
            for (pos, &t) in rows.iter().enumerate() {
                entries[t].push((pos, 1.0));
            }
            let scattered = g.mix_rows(yi, Rc::new(RowMap { in_rows: rows.len(), entries }))?;
            total = Some(match total {
                Some(acc) => g.add(acc, scattered)?,
                None => scattered,
            });
        }
        total.ok_or_else(|| Error::InvalidArgument("routing selected no adapters".into()))
    }

    /// `t_att` is `n × 2r`; noise is drawn from `noise` when present
    /// (training), otherwise routing is deterministic.
    pub fn forward(&self, g: &mut Graph, t_att: Var, mut noise: Option<&mut Rng>) -> Result<AoMoAOut> {
        let cols = g.cols(t_att);
        if cols != 2 * self.half {
            return Err(Error::Shape(format!("AoMoA expects width {}, got {cols}", 2 * self.half)));
        }
        let down = g.param(self.w_down);
        let up = g.param(self.w_up);
        let mut outs = Vec::with_capacity(2);
        let mut decisions = Vec::with_capacity(2);
        for attr in [Attr::Spa, Attr::Spe] {
            let start = attr as usize * self.half;
            let part = g.slice_cols(t_att, start, start + self.half)?;
            let z = g.matmul(part, down)?;
            let (w, d) = self.route(g, z, attr, noise.as_deref_mut())?;
            let m = self.mix(g, z, w, &d)?;
            outs.push(g.matmul(m, up)?);
            decisions.push(d);
        }
        let cat = g.concat_cols(&outs)?;
        let s1 = g.param(self.s1);
        let out = g.mul_row(cat, s1)?;
        let spe = decisions.pop().expect("two attributes");
        let spa = decisions.pop().expect("two attributes");
        Ok(AoMoAOut { out, decisions: [spa, spe] })
    }
}

/// `f̂ = f_ffn + f_aomoa`.
pub fn inject(g: &mut Graph, ffn_out: Var, f_aomoa: Var) -> Result<Var> {
    g.add(ffn_out, f_aomoa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_params, max_rel_err};
    use crate::numerics::{softmax, NEG_SENTINEL};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn bank(seed: u64, width: usize, k: usize) -> (ParamStore, AoMoA) {
        let mut store = ParamStore::new();
        let m = AoMoA::new(&mut store, "m", width, 4, k, &mut Rng::new(seed)).unwrap();
        (store, m)
    }

    fn randomize(store: &mut ParamStore, ids: &[ParamId], std: f64, rng: &mut Rng) {
        for &id in ids {
            let shape = store.get(id).shape.clone();
            store.get_mut(id).tensor = Tensor::randn(&shape, std, rng);
        }
    }

    /// Best-K subset by exhaustive enumeration, renormalized exponentials.
    fn subset_oracle(logits: &[f64], k: usize) -> Vec<f64> {
        let n = logits.len();
        let mut best: Option<(f64, u32)> = None;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let score: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| logits[i]).sum();
            if best.map_or(true, |(s, _)| score > s) {
                best = Some((score, mask));
            }
        }
        let mask = best.unwrap().1;
        let z: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| libm::exp(logits[i])).sum();
        (0..n).map(|i| if mask & (1 << i) != 0 { libm::exp(logits[i]) / z } else { 0.0 }).collect()
    }

    #[test]
    fn route_matches_subset_oracle() {
        let (mut store, m) = bank(0, 64, 2);
        let mut rng = Rng::new(1);
        randomize(&mut store, &m.gate, 1.0, &mut rng);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let mut g = Graph::new(&store, false);
        let xv = g.constant(&x);
        let (_, d) = m.route(&mut g, xv, Attr::Spa, None).unwrap();
        let logits = crate::numerics::matmul(&x, &store.get(m.gate[0]).tensor).unwrap();
        for t in 0..4 {
            let want = subset_oracle(logits.row(t), 2);
            for (a, b) in d.weights.row(t).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_k_is_dense_softmax() {
        let (mut store, m) = bank(2, 64, 4);
        let mut rng = Rng::new(3);
        randomize(&mut store, &m.gate, 1.0, &mut rng);
        let x = Tensor::randn(&[10, 8], 1.0, &mut rng);
        let mut g = Graph::new(&store, false);
        let xv = g.constant(&x);
        let (_, d) = m.route(&mut g, xv, Attr::Spe, None).unwrap();
        let logits = crate::numerics::matmul(&x, &store.get(m.gate[1]).tensor).unwrap();
        assert!(d.weights.max_abs_diff(&softmax(&logits, 1).unwrap()) < 1e-9);
    }

    #[test]
    fn tied_gates_pick_lowest_indices() {
        let (store, m) = bank(4, 64, 2);
        let x = Tensor::randn(&[5, 8], 1.0, &mut Rng::new(5));
        let mut g = Graph::new(&store, false);
        let xv = g.constant(&x);
        let (_, d) = m.route(&mut g, xv, Attr::Spa, None).unwrap();
        for t in 0..5 {
            assert_eq!(d.selected[t], vec![0, 1]);
            assert_eq!(d.weights.row(t), &[0.5, 0.5, 0.0, 0.0]);
        }
    }

    fn dense_oracle(store: &ParamStore, m: &AoMoA, x: &Tensor, w: &Tensor) -> Tensor {
        let mut g = Graph::new(store, false);
        let xv = g.constant(x);
        let mut acc = vec![0.0; x.len()];
        for (i, a) in m.adapters.iter().enumerate() {
            let y = a.forward(&mut g, xv).unwrap();
            for (t, row) in g.value(y).chunks(x.cols()).enumerate() {
                for (c, v) in row.iter().enumerate() {
                    acc[t * x.cols() + c] += w.at(t, i) * v;
                }
            }
        }
        Tensor::new(x.shape(), acc).unwrap()
    }

    #[test]
    fn sparse_mix_matches_dense_oracle() {
        let (mut store, m) = bank(6, 64, 2);
        let mut rng = Rng::new(7);
        randomize(&mut store, &m.gate, 1.0, &mut rng);
        let x = Tensor::randn(&[32, 8], 1.0, &mut rng);
        let mut g = Graph::new(&store, true);
        let xv = g.constant(&x);
        let (w, d) = m.route(&mut g, xv, Attr::Spa, Some(&mut rng)).unwrap();
        let y = m.mix(&mut g, xv, w, &d).unwrap();
        let want = dense_oracle(&store, &m, &x, &d.weights);
        assert!(g.tensor(y).max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn one_hot_and_identical_adapters() {
        let (store, m) = bank(8, 64, 1);
        let x = Tensor::randn(&[6, 8], 1.0, &mut Rng::new(9));
        let mut g = Graph::new(&store, false);
        let xv = g.constant(&x);
        let (w, d) = m.route(&mut g, xv, Attr::Spa, None).unwrap();
        let y = m.mix(&mut g, xv, w, &d).unwrap();
        let direct = m.adapters[0].forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y), g.value(direct));

        let (mut store, m) = bank(10, 64, 2);
        let src = m.adapters[0].clone();
        for a in &m.adapters[1..] {
            for (to, from) in [(a.fc1.weight, src.fc1.weight), (a.fc2.weight, src.fc2.weight)] {
                store.get_mut(to).tensor = store.get(from).tensor.clone();
            }
        }
        let mut rng = Rng::new(11);
        randomize(&mut store, &m.gate, 1.0, &mut rng);
        let mut g = Graph::new(&store, false);
        let xv = g.constant(&x);
        let (w, d) = m.route(&mut g, xv, Attr::Spe, None).unwrap();
        let y = m.mix(&mut g, xv, w, &d).unwrap();
        let direct = m.adapters[0].forward(&mut g, xv).unwrap();
        assert!(g.tensor(y).max_abs_diff(&g.tensor(direct)) < 1e-12);
    }

    #[test]
    fn zero_scale_annihilates_and_inject_is_identity() {
        let (store, m) = bank(12, 64, 2);
        let x = Tensor::randn(&[16, 64], 1.0, &mut Rng::new(13));
        let mut g = Graph::new(&store, true);
        let xv = g.constant(&x);
        let out = m.forward(&mut g, xv, Some(&mut Rng::new(14))).unwrap();
        assert!(g.value(out.out).iter().all(|&v| v == 0.0));
        let y = inject(&mut g, xv, out.out).unwrap();
        assert_eq!(g.value(y), x.data());
    }

    #[test]
    fn inject_commutes_with_row_permutation() {
        let mut rng = Rng::new(15);
        let a = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let perm = [3, 1, 4, 0, 2];
        let store = ParamStore::new();
        let mut g = Graph::new(&store, false);
        let (av, bv) = (g.constant(&a), g.constant(&b));
        let y = inject(&mut g, av, bv).unwrap();
        let pa = g.gather_rows(av, &perm).unwrap();
        let pb = g.gather_rows(bv, &perm).unwrap();
        let py = inject(&mut g, pa, pb).unwrap();
        let yp = g.gather_rows(y, &perm).unwrap();
        assert_eq!(g.value(py), g.value(yp));
    }

    #[test]
    fn eval_routing_is_deterministic() {
        let (mut store, m) = bank(16, 64, 2);
        let mut rng = Rng::new(17);
        randomize(&mut store, &m.gate, 1.0, &mut rng);
        randomize(&mut store, &[m.s1], 1.0, &mut rng);
        let x = Tensor::randn(&[16, 64], 1.0, &mut rng);
        let run = || {
            let mut g = Graph::new(&store, false);
            let xv = g.constant(&x);
            let out = m.forward(&mut g, xv, None).unwrap();
            (g.tensor(out.out), out.decisions)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, m) = bank(18, 64, 2);
        let mut rng = Rng::new(19);
        let mut ids = vec![m.s1, m.w_down, m.w_up];
        ids.extend(m.gate);
        ids.extend(m.noise);
        randomize(&mut store, &ids, 0.5, &mut rng);
        let x = Tensor::randn(&[8, 64], 1.0, &mut rng);
        let ffn = Tensor::randn(&[8, 64], 1.0, &mut rng);
        let target = Tensor::randn(&[8, 64], 1.0, &mut rng);
        let mut coords = Vec::new();
        for &id in &ids {
            for k in [0, 5, 17] {
                coords.push((id, k));
            }
        }
        coords.push((m.adapters[0].fc1.weight, 3));
        coords.push((m.adapters[3].fc2.bias.unwrap(), 2));
        let probes = check_params(&store, true, &coords, |g| {
            let xv = g.constant(&x);
            let f = g.constant(&ffn);
            let out = m.forward(g, xv, Some(&mut Rng::new(20)))?;
            let y = inject(g, f, out.out)?;
            let t = g.constant(&target);
            g.mse(y, t)
        })
        .unwrap();
        assert!(max_rel_err(&probes) < 1e-4, "{probes:?}");
        // s1 gradient: upstream gradient summed against the pre-scaling output.
        let s1_probe = probes[0];
        assert!(s1_probe.analytic != 0.0);
    }

    #[test]
    fn noise_symmetry_gives_uniform_selection() {
        let (store, m) = bank(21, 64, 2);
        let x = Tensor::randn(&[10_000, 8], 1.0, &mut Rng::new(22));
        let mut g = Graph::new(&store, true);
        let xv = g.constant(&x);
        let (_, d) = m.route(&mut g, xv, Attr::Spa, Some(&mut Rng::new(23))).unwrap();
        let mut counts = [0f64; 4];
        for sel in &d.selected {
            for &i in sel {
                counts[i] += 1.0;
            }
        }
        let expected = 10_000.0 * 2.0 / 4.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected) * (c - expected) / expected).sum();
        // 99th percentile of χ² with 3 degrees of freedom.
        assert!(chi2 < 11.345, "χ² = {chi2}, counts {counts:?}");
    }

    #[test]
    fn masked_entries_use_sentinel_not_infinity() {
        let (store, m) = bank(24, 64, 2);
        let mut g = Graph::new(&store, false);
        let x = g.constant(&Tensor::randn(&[3, 8], 1.0, &mut Rng::new(25)));
        let wg = g.param(m.gate[0]);
        let h = g.matmul(x, wg).unwrap();
        let masked = g.top_k_mask(h, 2).unwrap();
        assert!(g.value(masked).iter().all(|v| v.is_finite()));
        assert_eq!(g.value(masked).iter().filter(|&&v| v == NEG_SENTINEL).count(), 3 * 2);
    }

    proptest! {
        #[test]
        fn routing_rows_are_valid(seed in 0u64..1000, k in 1usize..=4) {
            let (mut store, m) = bank(seed, 64, k);
            let mut rng = Rng::new(seed ^ 0x5a5a);
            let ids = [m.gate[0], m.noise[0]];
            randomize(&mut store, &ids, 2.0, &mut rng);
            let x = Tensor::randn(&[64, 8], 1.0, &mut rng);
            let mut g = Graph::new(&store, true);
            let xv = g.constant(&x);
            let (_, d) = m.route(&mut g, xv, Attr::Spa, Some(&mut rng)).unwrap();
            for t in 0..64 {
                let row = d.weights.row(t);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                let support: Vec<usize> = (0..4).filter(|&i| row[i] > 0.0).collect();
                prop_assert_eq!(support.len(), k);
                prop_assert_eq!(&support, &d.selected[t]);
            }
        }
    }
}
