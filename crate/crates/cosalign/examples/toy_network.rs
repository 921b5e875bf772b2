//! Anatomy of the segmentation network: strided feature extractor, 1x1
//! classifier head, and the tap stack the multi-layer variant aligns.
//!
//!     cargo run --example toy_network

use cosalign::net::{SegNet, BLOCK_CHANNELS, DOWNSAMPLE};
use cosalign::synthdata::{render_scene, Domain, SceneParams, ShiftParams};
use cosalign::{imageio, Scalar};

fn main() {
    let classes = 5;
    let feature_dim = 32;
    let net: SegNet<Scalar> = SegNet::new(classes, feature_dim, 7);
    println!(
        "network: 3 -> {} -> {} -> {feature_dim} features -> {classes} classes, \
         {} parameters, downsample x{DOWNSAMPLE}",
        BLOCK_CHANNELS[0],
        BLOCK_CHANNELS[1],
        net.parameter_count()
    );

    let params = SceneParams { classes, height: 64, width: 64 };
    let scene =
        render_scene(&params, &ShiftParams::NONE, 42, Domain::Source, None).unwrap();
    let image = imageio::rgb_to_tensor::<Scalar>(scene.width, scene.height, &scene.rgb);

    // Features live on a coarse grid; logits share it.
    let feats = net.features(&image).unwrap();
    let logits = net.logits_from(&feats).unwrap();
    println!("image {:?} -> features {:?} -> logits {:?}", image.shape(), feats.shape(), logits.shape());

    // Taps for the multi-layer variant, deepest first.
    for (i, tap) in net.taps(&image).unwrap().iter().enumerate() {
        println!("  tap {i}: {:?}", tap.shape());
    }

    // Prediction resizes logits back to any requested resolution.
    let full = net.predict(&image, 64, 64).unwrap();
    println!("predict -> {:?} (bilinear upsample of the logits)", full.shape());

    for (name, t) in net.parameters() {
        println!("  {name:<18} {:?}", t.shape());
    }
}
