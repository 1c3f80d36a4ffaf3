use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec, ParamStore, Session};
use crate::tensor::{Rng, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct InvertedResidual {
    pub expand: Conv,
    pub depthwise: Conv,
    pub project: Conv,
    pub residual: bool,
}

impl InvertedResidual {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        expansion: usize,
    ) -> Result<Self> {
        let e = cin * expansion;
        Ok(Self {
            expand: Conv::new(store, rng, &format!("{name}.expand"), ConvSpec { kernel: 1, cin, cout: e, stride: 1, padding: 0, groups: 1 })?,
            depthwise: Conv::new(store, rng, &format!("{name}.depthwise"), ConvSpec { kernel: 3, cin: e, cout: e, stride, padding: 1, groups: e })?,
            project: Conv::new(store, rng, &format!("{name}.project"), ConvSpec { kernel: 1, cin: e, cout, stride: 1, padding: 0, groups: 1 })?,
            residual: stride == 1 && cin == cout,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.expand.forward(s, x)?.relu6()?;
        let h = self.depthwise.forward(s, &h)?.relu6()?;
        let y = self.project.forward(s, &h)?;
        if self.residual {
            y.add(x)
        } else {
            Ok(y)
        }
    }
}

/// Stand-in for a lightweight image encoder: a stride-2 stem and three
/// inverted-residual stages, output stride 8.
#[derive(Debug, Clone)]
pub struct BackboneStub {
    pub stem: Conv,
    pub stages: Vec<InvertedResidual>,
    pub out_channels: usize,
}

const STEM_CHANNELS: usize = 16;
const MID_CHANNELS: usize = 24;

impl BackboneStub {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, prefix: &str, out_channels: usize) -> Result<Self> {
        let stem = Conv::new(
            store,
            rng,
            &format!("{prefix}.stem"),
            ConvSpec { kernel: 3, cin: 3, cout: STEM_CHANNELS, stride: 2, padding: 1, groups: 1 },
        )?;
        let plan = [
            (STEM_CHANNELS, MID_CHANNELS, 2, 4),
            (MID_CHANNELS, out_channels, 2, 4),
            (out_channels, out_channels, 1, 4),
        ];
        let stages = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride, e))| InvertedResidual::new(store, rng, &format!("{prefix}.stage{i}"), cin, cout, stride, e))
            .collect::<Result<_>>()?;
        Ok(Self { stem, stages, out_channels })
    }

    /// `[H, W, 3]` with `H, W` multiples of 8 -> `[H/8, W/8, C_vis]`.
    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, image: &Var<T>) -> Result<Var<T>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[2] != 3 || !shape[0].is_multiple_of(8) || !shape[1].is_multiple_of(8) {
            return Err(Error::shape("backbone", format!("expected [8a, 8b, 3], got {shape:?}")));
        }
        let mut x = self.stem.forward(s, image)?.relu6()?;
        for stage in &self.stages {
            x = stage.forward(s, &x)?;
        }
        Ok(x)
    }
}
