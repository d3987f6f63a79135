//! Attribute-refined adapter: match maps between hidden tokens and the
//! tokenizer's semantic features select one token per semantic feature; the
//! selections are refined along a spatial and a spectral path and added back
//! to the tokens through a zero-initialized scale.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::nn::{join, BatchNorm, Conv1d, Conv2d, LayerNorm, Linear};
use crate::numerics::{argmax, Graph, Init, ParamId, ParamStore, RowMap, Rng, Tensor, Var};
use crate::profile::{isqrt_exact, TokenizerProfile};

/// Raw scaled-dot association scores: `m_spa` is `L×S`, `m_spe` is `L×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMap {
    pub m_spa: Tensor,
    pub m_spe: Tensor,
}

impl MatchMap {
    /// Token index with the highest score for every semantic position
    /// (ties → lowest index).
    pub fn spa_indices(&self) -> Vec<usize> {
        argmax(&self.m_spa, 0).expect("matrix")
    }

    /// Token index with the highest score for every channel.
    pub fn spe_indices(&self) -> Vec<usize> {
        argmax(&self.m_spe, 0).expect("matrix")
    }
}

#[derive(Debug, Clone)]
pub struct AreAdapter {
    pub half: usize,
    pub tokens: usize,
    pub grid: usize,
    pub channels: usize,
    pub q_spa: Linear,
    pub k_spa: Linear,
    pub q_spe: Linear,
    pub k_spe: Linear,
    pub ln1: LayerNorm,
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub ln2: LayerNorm,
    pub conv2: Conv1d,
    pub bn2: BatchNorm,
    pub s2: ParamId,
}

/// Graph handles of one Are-adapter pass.
#[derive(Debug, Clone)]
pub struct AreOut {
    pub out: Var,
    pub maps: MatchMap,
    pub spa_idx: Vec<usize>,
    pub spe_idx: Vec<usize>,
}

impl AreAdapter {
    /// `width` is the token width `2r`.
    pub fn new(store: &mut ParamStore, name: &str, tok: &TokenizerProfile, width: usize, rng: &mut Rng) -> Result<Self> {
        let half = width / 2;
        let (s, c, l) = (tok.semantic_len(), tok.channels, tok.tokens);
        let side = isqrt_exact(l).ok_or_else(|| Error::Profile(format!("token count {l} is not a perfect square")))?;
        if isqrt_exact(s).is_none() || tok.grid % side != 0 {
            return Err(Error::Profile(format!("semantic grid {s} incompatible with token grid {l}")));
        }
        Ok(Self {
            half,
            tokens: l,
            grid: tok.grid,
            channels: c,
            q_spa: Linear::scaled(store, &join(name, "q_spa"), half, half, true, rng),
            k_spa: Linear::scaled(store, &join(name, "k_spa"), c, half, true, rng),
            q_spe: Linear::scaled(store, &join(name, "q_spe"), half, half, true, rng),
            k_spe: Linear::scaled(store, &join(name, "k_spe"), s, half, true, rng),
            ln1: LayerNorm::new(store, &join(name, "refine1.ln"), half),
            conv1: Conv2d::new(store, &join(name, "refine1.conv"), half, half, 3, 1, 1, true, rng),
            bn1: BatchNorm::new(store, &join(name, "refine1.bn"), half),
            ln2: LayerNorm::new(store, &join(name, "refine2.ln"), half),
            conv2: Conv1d::new(store, &join(name, "refine2.conv"), half, half, 3, 1, rng),
            bn2: BatchNorm::new(store, &join(name, "refine2.bn"), half),
            s2: store.add_init(join(name, "s2"), &[1, width], Init::Zeros, rng),
        })
    }

    fn token_side(&self) -> usize {
        isqrt_exact(self.tokens).expect("validated")
    }

    /// Scaled dot-product scores between projected token halves (queries)
    /// and projected semantic features (keys).
    pub fn match_maps(&self, g: &mut Graph, t_spa: Var, t_spe: Var, z_spa: Var, z_spe: Var) -> Result<(Var, Var)> {
        let scale = 1.0 / libm::sqrt(self.half as f64);
        let score = |g: &mut Graph, q: &Linear, k: &Linear, t: Var, z: Var| -> Result<Var> {
            let qv = q.forward(g, t)?;
            let kv = k.forward(g, z)?;
            let s = g.matmul_nt(qv, kv)?;
            g.scale(s, scale)
        };
        let m_spa = score(g, &self.q_spa, &self.k_spa, t_spa, z_spa)?;
        let m_spe = score(g, &self.q_spe, &self.k_spe, t_spe, z_spe)?;
        Ok((m_spa, m_spe))
    }

    /// Gathers the argmax token for every semantic feature and refines both
    /// paths back to `L × r`.
    pub fn select_refine(&self, g: &mut Graph, t_spa: Var, t_spe: Var, maps: &MatchMap) -> Result<(Var, Var, Vec<usize>, Vec<usize>)> {
        let spa_idx = maps.spa_indices();
        let spe_idx = maps.spe_indices();
        if spa_idx.len() != self.grid * self.grid || spe_idx.len() != self.channels {
            return Err(Error::Profile(format!("match maps {:?}/{:?} do not fit the adapter", maps.m_spa.shape(), maps.m_spe.shape())));
        }
        let side = self.token_side();

        let x = g.gather_rows(t_spa, &spa_idx)?;
        let x = self.ln1.forward(g, x)?;
        let x = self.conv1.forward(g, x, self.grid, self.grid)?;
        let x = self.bn1.forward(g, x)?;
        let x = g.relu(x)?;
        let spa = g.mix_rows(x, Rc::new(RowMap::avg_pool(self.grid, self.grid, self.grid / side)))?;

        let y = g.gather_rows(t_spe, &spe_idx)?;
        let y = self.ln2.forward(g, y)?;
        let y = self.conv2.forward(g, y)?;
        let y = self.bn2.forward(g, y)?;
        let y = g.relu(y)?;
        let spe = g.mix_rows(y, Rc::new(RowMap::linear(self.channels, self.tokens)))?;
        Ok((spa, spe, spa_idx, spe_idx))
    }

    /// `T' = T + s2 ⊙ [t'_spa, t'_spe]`.
    pub fn adjust(&self, g: &mut Graph, t_att: Var, spa: Var, spe: Var) -> Result<Var> {
        let cat = g.concat_cols(&[spa, spe])?;
        if g.dims(cat) != g.dims(t_att) {
            return Err(Error::Shape(format!("adjust: {:?} vs {:?}", g.dims(cat), g.dims(t_att))));
        }
        let s2 = g.param(self.s2);
        let d = g.mul_row(cat, s2)?;
        g.add(t_att, d)
    }

    pub fn forward(&self, g: &mut Graph, t_att: Var, z_spa: Var, z_spe: Var) -> Result<AreOut> {
        if g.dims(t_att) != (self.tokens, 2 * self.half) {
            return Err(Error::Shape(format!("Are-adapter expects {}×{} tokens, got {:?}", self.tokens, 2 * self.half, g.dims(t_att))));
        }
        let t_spa = g.slice_cols(t_att, 0, self.half)?;
        let t_spe = g.slice_cols(t_att, self.half, 2 * self.half)?;
        let (m_spa, m_spe) = self.match_maps(g, t_spa, t_spe, z_spa, z_spe)?;
        let maps = MatchMap { m_spa: g.tensor(m_spa), m_spe: g.tensor(m_spe) };
        let (spa, spe, spa_idx, spe_idx) = self.select_refine(g, t_spa, t_spe, &maps)?;
        let out = self.adjust(g, t_att, spa, spe)?;
        Ok(AreOut { out, maps, spa_idx, spe_idx })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_params, max_rel_err};
    use crate::profile::ModelProfile;
    use alloc::vec;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    struct Fixture {
        store: ParamStore,
        are: AreAdapter,
        t: Tensor,
        z_spa: Tensor,
        z_spe: Tensor,
    }

    fn fixture(seed: u64) -> Fixture {
        let p = ModelProfile::desk();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let are = AreAdapter::new(&mut store, "are", &p.tokenizer, 64, &mut rng).unwrap();
        Fixture {
            store,
            are,
            t: Tensor::randn(&[16, 64], 1.0, &mut rng),
            z_spa: Tensor::randn(&[64, 32], 1.0, &mut rng),
            z_spe: Tensor::randn(&[32, 64], 1.0, &mut rng),
        }
    }

    fn scan(m: &Tensor) -> Vec<usize> {
        (0..m.cols())
            .map(|j| {
                let mut best = 0;
                for i in 1..m.rows() {
                    if m.at(i, j) > m.at(best, j) {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    #[test]
    fn desk_shapes_and_scan_oracle() {
        let f = fixture(0);
        let mut g = Graph::new(&f.store, true);
        let (t, zs, ze) = (g.constant(&f.t), g.constant(&f.z_spa), g.constant(&f.z_spe));
        let out = f.are.forward(&mut g, t, zs, ze).unwrap();
        assert_eq!(out.maps.m_spa.shape(), &[16, 64]);
        assert_eq!(out.maps.m_spe.shape(), &[16, 32]);
        assert_eq!(g.dims(out.out), (16, 64));
        assert_eq!(out.spa_idx, scan(&out.maps.m_spa));
        assert_eq!(out.spe_idx, scan(&out.maps.m_spe));
        assert!(out.spa_idx.iter().chain(&out.spe_idx).all(|&i| i < 16));
    }

    #[test]
    fn gathered_rows_follow_argmax() {
        let f = fixture(1);
        let mut g = Graph::new(&f.store, true);
        let t = g.constant(&f.t);
        let t_spa = g.slice_cols(t, 0, 32).unwrap();
        let mut m_spa = Tensor::zeros(&[16, 64]);
        m_spa.data_mut()[5 * 64 + 9] = 1.0;
        let maps = MatchMap { m_spa, m_spe: Tensor::zeros(&[16, 32]) };
        let idx = maps.spa_indices();
        assert_eq!(idx[9], 5);
        assert!(idx.iter().enumerate().all(|(c, &i)| i == if c == 9 { 5 } else { 0 }));
        assert!(maps.spe_indices().iter().all(|&i| i == 0));
        let gathered = g.gather_rows(t_spa, &idx).unwrap();
        assert_eq!(&g.value(gathered)[9 * 32..10 * 32], &f.t.row(5)[..32]);
    }

    #[test]
    fn orthogonal_queries_and_keys_score_zero() {
        let f = fixture(2);
        let mut store = f.store.clone();
        // Queries project onto axis 0, keys onto axis 1.
        for (lin, col) in [(&f.are.q_spa, 0), (&f.are.k_spa, 1)] {
            let shape = store.get(lin.weight).shape.clone();
            let mut w = Tensor::zeros(&shape);
            w.data_mut()[col] = 1.0;
            store.get_mut(lin.weight).tensor = w;
        }
        let mut g = Graph::new(&store, false);
        let (t, zs, ze) = (g.constant(&f.t), g.constant(&f.z_spa), g.constant(&f.z_spe));
        let t_spa = g.slice_cols(t, 0, 32).unwrap();
        let t_spe = g.slice_cols(t, 32, 64).unwrap();
        let (m_spa, _) = f.are.match_maps(&mut g, t_spa, t_spe, zs, ze).unwrap();
        assert!(g.value(m_spa).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_scale_is_identity() {
        let f = fixture(3);
        let mut g = Graph::new(&f.store, true);
        let (t, zs, ze) = (g.constant(&f.t), g.constant(&f.z_spa), g.constant(&f.z_spe));
        let out = f.are.forward(&mut g, t, zs, ze).unwrap();
        assert_eq!(g.value(out.out), f.t.data());
    }

    #[test]
    fn unit_scale_with_zero_refinement_is_identity() {
        let f = fixture(4);
        let mut store = f.store.clone();
        store.get_mut(f.are.s2).tensor = Tensor::full(&[1, 64], 1.0);
        let mut g = Graph::new(&store, true);
        let t = g.constant(&f.t);
        let z = g.constant(&Tensor::zeros(&[16, 32]));
        let y = f.are.adjust(&mut g, t, z, z).unwrap();
        assert_eq!(g.value(y), f.t.data());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = fixture(5);
        let mut store = f.store.clone();
        let mut rng = Rng::new(6);
        store.get_mut(f.are.s2).tensor = Tensor::randn(&[1, 64], 1.0, &mut rng);
        let target = Tensor::randn(&[16, 64], 1.0, &mut rng);
        let a = &f.are;
        let coords = vec![
            (a.s2, 0),
            (a.s2, 40),
            (a.conv1.weight, 11),
            (a.conv1.bias.unwrap(), 3),
            (a.bn1.gamma, 2),
            (a.ln1.beta, 7),
            (a.conv2.weight, 50),
            (a.bn2.beta, 1),
            (a.ln2.gamma, 4),
        ];
        let probes = check_params(&store, true, &coords, |g| {
            let (t, zs, ze) = (g.constant(&f.t), g.constant(&f.z_spa), g.constant(&f.z_spe));
            let out = a.forward(g, t, zs, ze)?;
            let tt = g.constant(&target);
            g.mse(out.out, tt)
        })
        .unwrap();
        assert!(probes.iter().all(|p| p.analytic != 0.0));
        assert!(max_rel_err(&probes) < 1e-4, "{probes:?}");
    }

    proptest! {
        #[test]
        fn argmax_ignores_column_shift_and_positive_scale(seed in 0u64..500, shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
            let mut rng = Rng::new(seed);
            let m = Tensor::randn(&[16, 64], 1.0, &mut rng);
            let maps = MatchMap { m_spa: m.clone(), m_spe: Tensor::zeros(&[16, 32]) };
            let base = maps.spa_indices();
            let moved: Vec<f64> = m.data().iter().map(|v| v * scale + shift).collect();
            let maps2 = MatchMap { m_spa: Tensor::new(&[16, 64], moved).unwrap(), m_spe: Tensor::zeros(&[16, 32]) };
            prop_assert_eq!(&base, &maps2.spa_indices());
            prop_assert!(base.iter().all(|&i| i < 16));
        }
    }
}
