use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::aomoa::{inject, AoMoA, RoutingDecision};
use crate::error::Result;
use crate::numerics::nn::{join, Attention, LayerNorm, LowRank, Mlp};
use crate::numerics::{Graph, ParamStore, Rng, Var};

pub const CORE_STD: f64 = 0.02;

/// Pre-norm transformer block. An AoMoA, when supplied, reads the FFN input
/// and is added to the FFN output.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, mlp_ratio: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &join(name, "ln1"), width),
            attn: Attention::new(store, &join(name, "attn"), width, width, width, width, heads, Some(CORE_STD), rng)?,
            ln2: LayerNorm::new(store, &join(name, "ln2"), width),
            mlp: Mlp::new(store, &join(name, "mlp"), (width, mlp_ratio * width, width), Some(CORE_STD), rng),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        aomoa: Option<&AoMoA>,
        lowrank: Option<&[LowRank; 4]>,
        noise: Option<&mut Rng>,
    ) -> Result<(Var, Option<[RoutingDecision; 2]>)> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward_adapted(g, h, h, None, lowrank)?;
        let x = g.add(x, a.out)?;
        let h = self.ln2.forward(g, x)?;
        let mut f = self.mlp.forward(g, h)?;
        let mut routing = None;
        if let Some(m) = aomoa {
            let out = m.forward(g, h, noise)?;
            f = inject(g, f, out.out)?;
            routing = Some(out.decisions);
        }
        Ok((g.add(x, f)?, routing))
    }
}

/// Low-rank deltas for the four attention projections of a block.
pub fn lowrank_set(store: &mut ParamStore, name: &str, width: usize, rank: usize, rng: &mut Rng) -> [LowRank; 4] {
    let mk = |store: &mut ParamStore, p: &str, rng: &mut Rng| LowRank::new(store, &join(name, p), width, width, rank, rng);
    [mk(store, "q", rng), mk(store, "k", rng), mk(store, "v", rng), mk(store, "o", rng)]
}

/// Scatter map placing `rows.len()` inputs at positions `rows` of an
/// `n`-row output; other rows are zero.
pub(crate) fn scatter_map(n: usize, rows: &[usize]) -> Rc<crate::numerics::RowMap> {
    let mut entries: Vec<Vec<(usize, f64)>> = alloc::vec![Vec::new(); n];
    for (pos, &t) in rows.iter().enumerate() {
        entries[t].push((pos, 1.0));
    }
    Rc::new(crate::numerics::RowMap { in_rows: rows.len(), entries })
}

pub(crate) fn site_name(prefix: &str, i: usize) -> alloc::string::String {
    format!("{prefix}.{i}")
}
