//! Feature-map shapes of every registered backbone.

use candle_core::{DType, Device, Tensor};
use colonnet::backbone::{build_backbone, BackboneKind, BackboneSpec};
use colonnet::nn::ParamStore;

fn main() -> colonnet::Result<()> {
    let size = 64;
    for kind in BackboneKind::ALL {
        let spec = BackboneSpec::new(kind, size);
        let store = ParamStore::new(0);
        let backbone = build_backbone(&spec, &store)?;
        let x = Tensor::zeros((1, 3, size, size), DType::F32, &Device::Cpu)?;
        let y = backbone.forward_t(&x, false)?;
        let params = store.num_parameters();
        println!(
            "{:<12} {size}x{size}x3 -> {:?} (declared {:?} at 224: {:?}), {params} parameters",
            kind.name(),
            y.dims(),
            spec.feature_shape().as_tuple(),
            BackboneSpec::new(kind, 224).feature_shape().as_tuple(),
        );
    }
    Ok(())
}
