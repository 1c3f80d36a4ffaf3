use crate::autograd::Var;
use crate::error::Result;
use crate::fusion::attention::multi_head_attention;
use crate::nn::{Conv, ConvSpec, LayerNorm, Linear, ParamStore, Session};
use crate::tensor::{Rng, Scalar, Tensor};

/// Inverted bottleneck: 1x1 expand, ReLU6, 3x3 depthwise, ReLU6, 1x1
/// project, plus the input.
#[derive(Debug, Clone, Copy)]
pub struct ConvBlock {
    pub expand: Conv,
    pub depthwise: Conv,
    pub project: Conv,
}

impl ConvBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, c: usize, expansion: usize) -> Result<Self> {
        let e = c * expansion;
        let pointwise = |cin, cout| ConvSpec { kernel: 1, cin, cout, stride: 1, padding: 0, groups: 1 };
        Ok(Self {
            expand: Conv::new(store, rng, &format!("{name}.expand"), pointwise(c, e))?,
            depthwise: Conv::new(
                store,
                rng,
                &format!("{name}.depthwise"),
                ConvSpec { kernel: 3, cin: e, cout: e, stride: 1, padding: 1, groups: e },
            )?,
            project: Conv::new(store, rng, &format!("{name}.project"), pointwise(e, c))?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.expand.forward(s, x)?.relu6()?;
        let h = self.depthwise.forward(s, &h)?.relu6()?;
        self.project.forward(s, &h)?.add(x)
    }

    pub(crate) fn zero_output<T: Scalar>(&self, store: &mut ParamStore<T>) {
        zero(store, self.project.weight);
        if let Some(b) = self.project.bias {
            zero(store, b);
        }
    }
}

/// Post-LN transformer block: `T1 = LN(T + MHSA(T))`, `out = LN(T1 + FFN(T1))`.
/// No positional terms.
#[derive(Debug, Clone, Copy)]
pub struct FormerBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub heads: usize,
}

impl FormerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        c: usize,
        ffn_expansion: usize,
        heads: usize,
    ) -> Result<Self> {
        let f = c * ffn_expansion;
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.attn.query"), c, c)?,
            key: Linear::new(store, rng, &format!("{name}.attn.key"), c, c)?,
            value: Linear::new(store, rng, &format!("{name}.attn.value"), c, c)?,
            out: Linear::new(store, rng, &format!("{name}.attn.out"), c, c)?,
            ffn_in: Linear::new(store, rng, &format!("{name}.ffn.fc1"), c, f)?,
            ffn_out: Linear::new(store, rng, &format!("{name}.ffn.fc2"), f, c)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c)?,
            heads,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, t: &Var<T>) -> Result<Var<T>> {
        let q = self.query.forward(s, t)?;
        let k = self.key.forward(s, t)?;
        let v = self.value.forward(s, t)?;
        let attn = self.out.forward(s, &multi_head_attention(&q, &k, &v, self.heads)?)?;
        let t1 = self.norm1.forward(s, &t.add(&attn)?)?;
        let ffn = self.ffn_out.forward(s, &self.ffn_in.forward(s, &t1)?.gelu()?)?;
        self.norm2.forward(s, &t1.add(&ffn)?)
    }

    pub(crate) fn zero_output<T: Scalar>(&self, store: &mut ParamStore<T>) {
        zero(store, self.norm2.gamma);
        zero(store, self.norm2.beta);
    }
}

pub(crate) fn zero<T: Scalar>(store: &mut ParamStore<T>, id: crate::nn::ParamId) {
    let shape = store.get(id).shape().to_vec();
    *store.get_mut(id) = Tensor::zeros(&shape).with_requires_grad();
}
