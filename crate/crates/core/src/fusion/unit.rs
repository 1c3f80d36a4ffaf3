use super::attention::{cross_attention_c2f, cross_attention_f2c, downsample_patches, inner_product_attend};
use super::blocks::{zero, ConvBlock, FormerBlock};
use super::config::{BridgeVariant, ConvFormerConfig};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec, Linear, ParamStore, Session};
use crate::tensor::{Rng, Scalar};

/// Image-to-text bridge: patch aggregation plus, for the cross-attention
/// variant, the query and output projections.
#[derive(Debug, Clone, Copy)]
pub struct BridgeC2f {
    pub downsample: Conv,
    pub kernel: usize,
    pub projections: Option<(Linear, Linear)>,
}

/// Text-to-image bridge: key and value projections on the text side only.
#[derive(Debug, Clone, Copy)]
pub struct BridgeF2c {
    pub projections: Option<(Linear, Linear)>,
}

#[derive(Debug, Clone)]
pub struct ConvFormerUnit {
    pub conv: ConvBlock,
    pub former: FormerBlock,
    pub c2f: BridgeC2f,
    pub f2c: BridgeF2c,
    pub heads: usize,
    pub variant: BridgeVariant,
}

impl ConvFormerUnit {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, cfg: &ConvFormerConfig) -> Result<Self> {
        let c = cfg.channels;
        let cross = cfg.bridge_variant == BridgeVariant::CrossAttention;
        let downsample = Conv::new(
            store,
            rng,
            &format!("{name}.bridge_c2f.downsample"),
            ConvSpec {
                kernel: cfg.downsample_kernel,
                cin: c,
                cout: c,
                stride: cfg.downsample_stride,
                padding: 0,
                groups: 1,
            },
        )?;
        let c2f_proj = if cross {
            Some((
                Linear::new(store, rng, &format!("{name}.bridge_c2f.query"), c, c)?,
                Linear::new(store, rng, &format!("{name}.bridge_c2f.out"), c, c)?,
            ))
        } else {
            None
        };
        let conv = ConvBlock::new(store, rng, &format!("{name}.conv"), c, cfg.bottleneck_expansion)?;
        let former = FormerBlock::new(store, rng, &format!("{name}.former"), c, cfg.ffn_expansion, cfg.heads)?;
        let f2c_proj = if cross {
            Some((
                Linear::new(store, rng, &format!("{name}.bridge_f2c.key"), c, c)?,
                Linear::new(store, rng, &format!("{name}.bridge_f2c.value"), c, c)?,
            ))
        } else {
            None
        };
        let unit = Self {
            conv,
            former,
            c2f: BridgeC2f {
                downsample,
                kernel: cfg.downsample_kernel,
                projections: c2f_proj,
            },
            f2c: BridgeF2c { projections: f2c_proj },
            heads: cfg.heads,
            variant: cfg.bridge_variant,
        };
        if cfg.zero_init_out_proj {
            unit.zero_outputs(store);
        }
        Ok(unit)
    }

    /// Zeroes the last affine map feeding each stream: the Conv2Former output
    /// projection, the Former2Conv value projection, the Conv block's
    /// projection and the Former's final normalisation.
    pub fn zero_outputs<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.conv.zero_output(store);
        self.former.zero_output(store);
        for lin in [self.c2f.projections.map(|p| p.1), self.f2c.projections.map(|p| p.1)]
            .into_iter()
            .flatten()
        {
            zero(store, lin.weight);
            if let Some(b) = lin.bias {
                zero(store, b);
            }
        }
    }

    /// One unit over `image: [H, W, C]` and `text: [K, C]`:
    /// 1. `x = downsample(image)`
    /// 2. `text += Conv2Former(text, x)`
    /// 3. `image_c = Conv(image)`, `text_f = Former(text)`
    /// 4. `image' = image_c + Former2Conv(image_c, text_f)`, `text' = text_f`
    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, image: &Var<T>, text: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let shape = image.shape();
        let &[h, w, c] = shape.as_slice() else {
            return Err(Error::shape("conv_former_unit", format!("image must be [H, W, C], got {shape:?}")));
        };
        let ds = &self.c2f.downsample;
        let tokens = downsample_patches(image, &s.p(ds.weight), s.opt(ds.bias).as_ref(), self.c2f.kernel, ds.stride)?;
        let injected = match self.c2f.projections {
            Some((q, o)) => cross_attention_c2f(
                text,
                &tokens,
                &s.p(q.weight),
                s.opt(q.bias).as_ref(),
                &s.p(o.weight),
                s.opt(o.bias).as_ref(),
                self.heads,
            )?,
            None => inner_product_attend(text, &tokens)?,
        };
        let text = text.add(&injected)?;

        let image_c = self.conv.forward(s, image)?;
        let text_f = self.former.forward(s, &text)?;

        let pixels = image_c.reshape(&[h * w, c])?;
        let context = match self.f2c.projections {
            Some((k, v)) => cross_attention_f2c(
                &pixels,
                &text_f,
                &s.p(k.weight),
                s.opt(k.bias).as_ref(),
                &s.p(v.weight),
                s.opt(v.bias).as_ref(),
                self.heads,
            )?,
            None => inner_product_attend(&pixels, &text_f)?,
        };
        let image_out = pixels.add(&context)?.reshape(&[h, w, c])?;
        Ok((image_out, text_f))
    }
}

/// `depth` independently parameterised units plus the module-level residual.
#[derive(Debug, Clone)]
pub struct FusionStack {
    pub config: ConvFormerConfig,
    pub units: Vec<ConvFormerUnit>,
}

impl FusionStack {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, prefix: &str, config: &ConvFormerConfig) -> Result<Self> {
        config.validate()?;
        let units = (0..config.depth)
            .map(|i| ConvFormerUnit::new(store, rng, &format!("{prefix}.unit{i}"), config))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            units,
        })
    }

    pub fn depth(&self) -> usize {
        self.units.len()
    }

    /// Chains the units and applies the module residual `[T', I'] = F([T, I]) + [T, I]`.
    ///
    /// The image stream carries an identity path through every unit (the
    /// Conv block and Former2Conv are both additive), so its residual is
    /// already part of `F`. The text stream leaves each unit through a
    /// post-LN Former and has no identity path; the original `T` is added to
    /// the stack output explicitly. With no units the module is the identity.
    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, image: &Var<T>, text: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        if self.units.is_empty() {
            return Ok((image.clone(), text.clone()));
        }
        let (mut i, mut t) = (image.clone(), text.clone());
        for unit in &self.units {
            (i, t) = unit.forward(s, &i, &t)?;
        }
        Ok((i, t.add(text)?))
    }
}
