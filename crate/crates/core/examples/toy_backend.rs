//! Encodes an image with the toy backend, decodes it back and shows how an
//! identity vector shifts the noise prediction.

use image::{Rgb, RgbImage};
use sketchscene::backend::{Backend, EmbeddingBindings, ToyBackend};
use sketchscene::diffusion::SeededNoise;

fn main() {
    let toy = ToyBackend::new();
    println!("{:?}", toy.profile());

    let img = RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 16) as u8, 128, (y * 16) as u8]));
    let z = toy.encode_image(&img).unwrap();
    let back = toy.decode_latent(&z).unwrap();
    let err = img
        .as_raw()
        .iter()
        .zip(back.as_raw())
        .map(|(a, b)| a.abs_diff(*b))
        .max()
        .unwrap();
    println!("latent shape {:?}, max round-trip pixel error {err}", z.shape());

    let zt = SeededNoise::new(1).initial_latent(z.shape());
    for v in [0.0, 0.5] {
        let bindings = EmbeddingBindings::new().bind("<obj-cat>", vec![v; 16]);
        let cond = toy.encode_prompt("a photo of a <obj-cat>", &bindings).unwrap();
        let eps = toy.predict_noise(&zt, 500, &cond).unwrap();
        let mean = eps.as_slice().iter().sum::<f64>() / eps.len() as f64;
        println!("identity vector filled with {v}: mean prediction {mean:+.4}");
    }
}
