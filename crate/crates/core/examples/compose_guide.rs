//! Places generated objects into their boxes and writes the composite
//! guide: initial image, full mask, latent mask and placement log.

mod common;

use sketchscene::backend::StubAdapters;
use sketchscene::compose::{compose_guide, encode_guide};
use sketchscene::objects::generate_objects;

fn main() {
    let out = common::out_dir("compose_guide");
    let spec = common::demo_scene();
    let assets = generate_objects(&spec, 7, &StubAdapters, 2, None).unwrap();
    let guide = compose_guide(&spec, &assets, 8).unwrap();
    let names = ["x_init.png", "mask_full.png", "mask_latent.png", "placement.json"];
    for (name, bytes) in names.iter().zip(encode_guide(&guide).unwrap()) {
        std::fs::write(out.join(name), bytes).unwrap();
    }
    for p in &guide.placement_log {
        println!("{} at {:?} (z {})", p.object_id, p.rect, p.z_index);
    }
    println!(
        "mask covers {} pixels, {} of {} latent cells",
        guide.mask_full.count(),
        guide.mask_latent.count(),
        guide.mask_latent.width() * guide.mask_latent.height()
    );
}
