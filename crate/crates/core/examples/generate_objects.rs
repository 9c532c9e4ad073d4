//! Crops each object's sketch, runs it through the stub generator and
//! segmenter, and writes the resulting assets.

mod common;

use sketchscene::backend::StubAdapters;
use sketchscene::objects::{generate_objects, save_asset, DEFAULT_RETRIES};

fn main() {
    let out = common::out_dir("generate_objects");
    let spec = common::demo_scene();
    let assets = generate_objects(&spec, 7, &StubAdapters, DEFAULT_RETRIES, None).unwrap();
    for asset in &assets {
        let prompt = spec.object(&asset.object_id).unwrap().effective_prompt();
        let dir = out.join(&asset.object_id.0);
        save_asset(asset, &prompt, &dir).unwrap();
        println!(
            "{}: {}x{} image, {} mask pixels, token {} -> {}",
            asset.object_id,
            asset.image.width(),
            asset.image.height(),
            asset.mask.count(),
            asset.identity_token,
            dir.display()
        );
    }
}
