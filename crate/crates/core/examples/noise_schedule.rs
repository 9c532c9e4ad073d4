//! Prints a 10-step schedule and checks that one sampler step with the
//! true noise lands exactly on the next forward-noised latent.

use sketchscene::diffusion::{forward_noise, make_schedule, sampler_step, ScheduleKind, SeededNoise};

fn main() {
    let sched = make_schedule(10, ScheduleKind::ScaledLinear).unwrap();
    for (t, ab) in sched.alpha_bars().iter().enumerate() {
        println!("t={t:2}  alpha_bar={ab:.6}");
    }

    let noise = SeededNoise::new(42);
    let z0 = noise.stream(100, (4, 8, 8));
    let eps = noise.stream(101, (4, 8, 8));
    let mut worst: f64 = 0.0;
    for t in 1..=10 {
        let z_t = forward_noise(&z0, t, &eps, &sched).unwrap();
        let stepped = sampler_step(&z_t, &eps, t, &sched).unwrap();
        let want = forward_noise(&z0, t - 1, &eps, &sched).unwrap();
        for (a, b) in stepped.as_slice().iter().zip(want.as_slice()) {
            worst = worst.max((a - b).abs());
        }
    }
    println!("max |step(noise(z0, t)) - noise(z0, t-1)| = {worst:.3e}");
}
