use std::path::Path;

use tract_onnx::prelude::*;

use super::{PatchSpec, PredictError, PredictorBackend, Result};
use crate::volgrid::Grid;

type Plan = TypedRunnableModel<TypedModel>;

/// ONNX network executed with tract. The model must take one
/// `[1, 4, D, H, W]` float input and return `[1, 3, D, H, W]`.
pub struct OnnxBackend {
    identity: String,
    spec: PatchSpec,
    plan: Plan,
    apply_sigmoid: bool,
    max_concurrency: usize,
}

impl OnnxBackend {
    pub fn load(
        identity: String,
        spec: PatchSpec,
        path: &Path,
        apply_sigmoid: bool,
        max_concurrency: Option<usize>,
    ) -> Result<Self> {
        let fail = |e: TractError| PredictError::ModelLoadFailure {
            backend: identity.clone(),
            message: format!("{}: {e:#}", path.display()),
        };
        if !path.is_file() {
            return Err(PredictError::ModelLoadFailure {
                backend: identity.clone(),
                message: format!("{} does not exist", path.display()),
            });
        }
        let [nx, ny, nz] = spec.patch_shape.dims();
        let plan = tract_onnx::onnx()
            .model_for_path(path)
            .and_then(|m| m.with_input_fact(0, f32::fact([1, spec.in_channels, nz, ny, nx]).into()))
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(fail)?;
        Ok(Self {
            identity,
            spec,
            plan,
            apply_sigmoid,
            max_concurrency: max_concurrency.unwrap_or(usize::MAX),
        })
    }
}

impl PredictorBackend for OnnxBackend {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn spec(&self) -> &PatchSpec {
        &self.spec
    }

    fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    fn predict(&self, patch: &Grid<f32>) -> Result<Grid<f32>> {
        let fail = |e: TractError| PredictError::BackendFailure {
            backend: self.identity.clone(),
            message: format!("{e:#}"),
        };
        let [nx, ny, nz] = patch.shape().dims();
        let input = Tensor::from_shape(&[1, patch.channels(), nz, ny, nx], patch.data()).map_err(fail)?;
        let outputs = self.plan.run(tvec!(input.into())).map_err(fail)?;
        let out = outputs[0].to_array_view::<f32>().map_err(fail)?;
        let expected = [1, self.spec.out_channels, nz, ny, nx];
        if out.shape() != expected {
            return Err(PredictError::BackendFailure {
                backend: self.identity.clone(),
                message: format!("output shape {:?}, expected {expected:?}", out.shape()),
            });
        }
        let mut data: Vec<f32> = out.iter().copied().collect();
        if self.apply_sigmoid {
            for v in &mut data {
                *v = 1.0 / (1.0 + (-*v).exp());
            }
        }
        Ok(Grid::new(patch.shape(), self.spec.out_channels, data).expect("shape checked"))
    }
}
