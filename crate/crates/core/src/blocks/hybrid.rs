use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Block;
use crate::cost::CostRow;
use crate::error::{Error, Result};
use crate::nn::{normal, ConvBn, ConvSpec, Ffn, LayerNorm, Mhsa};
use crate::params::{Ctx, ParamId, ParamKind, ParamStore};
use crate::tensor::Var;

/// `[N,d,H,W] -> [N·ph·pw, (H/ph)·(W/pw), d]`.
///
/// Pixels at the same position inside their patch form one sequence; the
/// patches are the tokens. Sequence index is `n·ph·pw + i·pw + j` for
/// intra-patch offset `(i, j)`; token index is `a·(W/pw) + b` for patch
/// `(a, b)`.
pub fn unfold_tokens<'g>(x: Var<'g>, patch: (usize, usize)) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("unfold expects [N,d,H,W], got {s:?}")));
    }
    let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
    let (ph, pw) = patch;
    if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::IndivisibleSpatialDims { h, w, ph, pw });
    }
    let (nh, nw) = (h / ph, w / pw);
    x.reshape(&[n, d, nh, ph, nw, pw])?
        .permute(&[0, 3, 5, 2, 4, 1])?
        .reshape(&[n * ph * pw, nh * nw, d])
}

/// Exact inverse of [`unfold_tokens`].
pub fn fold_tokens<'g>(z: Var<'g>, n: usize, h: usize, w: usize, patch: (usize, usize)) -> Result<Var<'g>> {
    let (ph, pw) = patch;
    if ph == 0 || pw == 0 || !h.is_multiple_of(ph) || !w.is_multiple_of(pw) {
        return Err(Error::IndivisibleSpatialDims { h, w, ph, pw });
    }
    let s = z.shape();
    let (nh, nw) = (h / ph, w / pw);
    if s.len() != 3 || s[0] != n * ph * pw || s[1] != nh * nw {
        return Err(Error::shape(format!("fold of {s:?} into {n}x?x{h}x{w} with patch {patch:?}")));
    }
    let d = s[2];
    z.reshape(&[n, ph, pw, nh, nw, d])?
        .permute(&[0, 5, 3, 1, 4, 2])?
        .reshape(&[n, d, h, w])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridArgs {
    pub c_in: usize,
    /// Token width and output channels.
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub patch: [usize; 2],
    /// Spatial size of the block input; fixes the positional table length.
    pub input_hw: [usize; 2],
}

/// Pre-norm transformer layer: `z += MHSA(LN z); z += FFN(LN z)`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: Mhsa,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Mhsa::new(store, rng, &format!("{name}.attn"), d, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ffn: Ffn::new(store, rng, &format!("{name}.ffn"), d, hidden),
        })
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, z: Var<'g>) -> Result<Var<'g>> {
        let z = z.add(&self.attn.forward(cx, self.ln1.forward(cx, z)?)?)?;
        z.add(&self.ffn.forward(cx, self.ln2.forward(cx, z)?)?)
    }

    fn cost(&self, seqs: usize, t: usize) -> Vec<CostRow> {
        let shape = vec![seqs, t, self.attn.d];
        let mut rows = vec![self.ln1.cost(shape.clone())];
        rows.extend(self.attn.cost(seqs, t));
        rows.push(self.ln2.cost(shape));
        rows.extend(self.ffn.cost(seqs * t));
        rows
    }
}

/// Convolution/transformer hybrid:
/// `X' = ReLU6(BN(conv3×3 s2 X))`, `Z = Transformer(unfold(X') + E)`,
/// `X̂ = BN(conv1×1 s2 X)`, `Y = X̂ + fold(Z)`.
#[derive(Clone, Debug)]
pub struct HybridBlock {
    pub name: String,
    pub args: HybridArgs,
    pub down: ConvBn,
    pub pos_embed: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub local: ConvBn,
    tokens: usize,
}

impl HybridBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, args: HybridArgs) -> Result<Self> {
        if args.c_in == 0 || args.d == 0 || args.ffn_hidden == 0 {
            return Err(Error::config(name, "hybrid widths must be positive"));
        }
        if args.heads == 0 || !args.d.is_multiple_of(args.heads) {
            return Err(Error::HeadsDontDivide { heads: args.heads, d_model: args.d });
        }
        let down_spec = ConvSpec::new(args.c_in, args.d, 3).stride(2);
        let (h2, w2) = down_spec.output_hw(args.input_hw[0], args.input_hw[1])?;
        let [ph, pw] = args.patch;
        if ph == 0 || pw == 0 || h2 % ph != 0 || w2 % pw != 0 {
            return Err(Error::IndivisibleSpatialDims { h: h2, w: w2, ph, pw });
        }
        let tokens = (h2 / ph) * (w2 / pw);
        let down = ConvBn::new(store, rng, &format!("{name}.down"), down_spec, true)?;
        let pos = normal(rng, &[tokens, args.d], 0.02);
        let pos_embed = store.add(format!("{name}.pos_embed"), pos, ParamKind::NoDecay);
        let layers = (0..args.depth)
            .map(|i| TransformerLayer::new(store, rng, &format!("{name}.layers.{i}"), args.d, args.heads, args.ffn_hidden))
            .collect::<Result<Vec<_>>>()?;
        let local = ConvBn::new(store, rng, &format!("{name}.local"), ConvSpec::pointwise(args.c_in, args.d).stride(2), false)?;
        Ok(Self { name: name.to_string(), args, down, pos_embed, layers, local, tokens })
    }

    pub fn patch(&self) -> (usize, usize) {
        (self.args.patch[0], self.args.patch[1])
    }

    /// Token count per sequence, fixed at construction.
    pub fn tokens(&self) -> usize {
        self.tokens
    }
}

impl Block for HybridBlock {
    fn kind(&self) -> &'static str {
        "hybrid"
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let xp = self.down.forward(cx, x)?;
        let s = xp.shape();
        let (n, h, w) = (s[0], s[2], s[3]);
        let tokens = unfold_tokens(xp, self.patch())?;
        if tokens.shape()[1] != self.tokens {
            return Err(Error::shape(format!(
                "{}: {} tokens but positional table has {}",
                self.name,
                tokens.shape()[1],
                self.tokens
            )));
        }
        let mut z = tokens.add(&cx.param(self.pos_embed))?;
        for layer in &self.layers {
            z = layer.forward(cx, z)?;
        }
        let zf = fold_tokens(z, n, h, w, self.patch())?;
        let xhat = self.local.forward(cx, x)?;
        xhat.add(&zf)
    }

    fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let a = self.down.output_shape(input)?;
        let b = self.local.output_shape(input)?;
        if a != b {
            return Err(Error::shape(format!("{}: branch shapes {a:?} and {b:?} differ", self.name)));
        }
        Ok(a)
    }

    fn cost(&self, input: [usize; 3]) -> Result<Vec<CostRow>> {
        let xp = self.down.output_shape(input)?;
        let (ph, pw) = self.patch();
        let seqs = ph * pw;
        let t = (xp[1] / ph) * (xp[2] / pw);
        let mut rows = self.down.cost(input)?;
        let pos = format!("{}.pos_embed", self.name);
        rows.push(CostRow::new(&pos, "embedding", (self.tokens * self.args.d) as u64, 0, vec![self.tokens, self.args.d]));
        for layer in &self.layers {
            rows.extend(layer.cost(seqs, t));
        }
        rows.extend(self.local.cost(input)?);
        Ok(rows)
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;
    use crate::params::Mode;
    use crate::tensor::{Graph, Tensor};
    use rand::SeedableRng;

    #[test]
    fn unfold_fold_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = uniform(&mut rng, &[2, 8, 4, 6], 1.0);
        let g = Graph::new();
        let t = unfold_tokens(g.constant(x.clone()), (2, 2)).unwrap();
        assert_eq!(t.shape(), vec![8, 6, 8]);
        let back = fold_tokens(t, 2, 4, 6, (2, 2)).unwrap().tensor();
        assert!(back.bitwise_eq(&x));
    }

    #[test]
    fn unfold_index_arithmetic() {
        let x = Tensor::from_fn(&[1, 8, 4, 4], |i| i as f64);
        let g = Graph::new();
        let t = unfold_tokens(g.constant(x.clone()), (2, 2)).unwrap().tensor();
        assert_eq!(t.shape(), &[4, 4, 8]);
        // sequence (i,j) = (1,0), token (a,b) = (0,1), channel 3 -> pixel (1, 2)
        assert_eq!(t.at(&[2, 1, 3]), x.at(&[0, 3, 1, 2]));
        assert!(matches!(
            unfold_tokens(g.constant(Tensor::zeros(&[1, 2, 5, 4])), (2, 2)),
            Err(Error::IndivisibleSpatialDims { h: 5, .. })
        ));
    }

    fn args() -> HybridArgs {
        HybridArgs { c_in: 8, d: 8, depth: 1, heads: 2, ffn_hidden: 16, patch: [2, 2], input_hw: [8, 8] }
    }

    #[test]
    fn zero_branches_reduce_to_local_projection() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = HybridBlock::new(&mut store, &mut rng, "h", args()).unwrap();
        let local: Vec<_> = [b.local.conv.weight, b.local.bn.gamma, b.local.bn.beta].into();
        for id in store.ids().collect::<Vec<_>>() {
            let e = store.entry(id);
            let keep = local.contains(&id) || e.kind == ParamKind::Buffer || e.name.contains(".ln") || e.name.ends_with("bn.weight");
            if !keep {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let g = Graph::new();
        let cx = Ctx::new(&g, &store, Mode::Train);
        let x = g.constant(uniform(&mut rng, &[1, 8, 8, 8], 1.0));
        let y = b.forward(&cx, x).unwrap().tensor();
        let xhat = b.local.forward(&cx, x).unwrap().tensor();
        assert_eq!(y.shape(), &[1, 8, 4, 4]);
        assert!(y.bitwise_eq(&xhat));
    }

    #[test]
    fn shape_contract_and_table_length() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = HybridBlock::new(&mut store, &mut rng, "h", HybridArgs { d: 12, heads: 3, ..args() }).unwrap();
        assert_eq!(b.output_shape([8, 8, 8]).unwrap(), [12, 4, 4]);
        assert_eq!(b.tokens(), 4);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store, Mode::Train);
        let y = b.forward(&cx, g.constant(uniform(&mut rng, &[2, 8, 8, 8], 1.0))).unwrap();
        assert_eq!(y.shape(), vec![2, 12, 4, 4]);
        // a 16x16 input yields 16 tokens against a 4-entry table
        assert!(matches!(
            b.forward(&cx, g.constant(Tensor::zeros(&[1, 8, 16, 16]))),
            Err(Error::ShapeMismatch(_))
        ));
        let bad = HybridArgs { input_hw: [6, 6], ..args() };
        assert!(matches!(
            HybridBlock::new(&mut store, &mut rng, "h2", bad),
            Err(Error::IndivisibleSpatialDims { h: 3, .. })
        ));
    }

    #[test]
    fn attention_cost_formula() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = HybridBlock::new(&mut store, &mut rng, "h", args()).unwrap();
        let rows = b.cost([8, 8, 8]).unwrap();
        let attn: Vec<_> = rows.iter().filter(|r| r.name.starts_with("h.layers.0.attn")).collect();
        let params: u64 = attn.iter().map(|r| r.params).sum();
        let macs: u64 = attn.iter().map(|r| r.macs).sum();
        let (d, t, seqs) = (8u64, 4u64, 4u64);
        assert_eq!(params, 4 * d * d + 4 * d);
        assert_eq!(macs, seqs * (4 * t * d * d + 2 * t * t * d));
        let total: u64 = rows.iter().map(|r| r.params).sum();
        assert_eq!(total as usize, store.num_params());
    }
}
