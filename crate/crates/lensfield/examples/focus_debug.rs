//! Scratch: per-ray decomposition of a focus-gradient mismatch.
use lensfield::field::FieldGrads;
use lensfield::grad::*;
use lensfield::optics::*;
use lensfield::render::*;
use lensfield::scenegen::*;
use lensfield::Rgb;

fn main() {
    let scene = SceneSpec::soft_occluder();
    let f = bake_scene(&scene, [48, 48, 48]).unwrap();
    let ds = DatasetSpec {
        train_count: 3,
        val_count: 1,
        width: 24,
        height: 24,
        ..DatasetSpec::desk_default()
    };
    let cams = make_hemisphere_cameras(&ds).unwrap();
    let bounds = scene_bounds(&ds, &scene.bbox);
    let g = Rgb::new(0.8, -0.3, 0.5);
    let n = 16usize;
    let cfg = RenderConfig {
        rays_per_pixel: n,
        step_size: 2e-3,
        bounds,
        max_samples_per_ray: 4096,
        background: Rgb::zeros(),
        use_occupancy: false,
        min_transmittance: 1e-12,
        seed: 5,
        serial: true,
    };
    let px = (12u32, 6u32);
    for (ci, cam) in cams.iter().enumerate() {
        let (_, tape) = render_pixel(&f, None, cam, px, &cfg).unwrap();
        let mut grads = FieldGrads::zeros_like(&f);
        let rbs = backward_pixel(
            &f,
            &tape,
            &PixelAdjoint { d_color: g },
            &mut grads,
        )
        .unwrap();
        let analytic = focus_gradient(cam, &tape, &rbs);
        let h = 1e-4 * cam.focus_distance;
        let fd = fd_oracle(
            |zf| {
                let mut c = cam.clone();
                c.focus_distance = zf;
                g.dot(&render_pixel_color(&f, None, &c, px, &cfg).unwrap().rgb)
            },
            cam.focus_distance,
            h,
        );
        println!("cam{ci}: analytic {analytic:+.6e} fd {fd:+.6e} rel {:.3e}", rel_err(analytic, fd));
        if rel_err(analytic, fd) < 1e-2 {
            continue;
        }
        // Per-ray: analytic contribution vs FD of that single ray.
        let seed = seed_for_pixel(&cfg, cam.width, px.0, px.1);
        let jitter = pixel_jitter(seed);
        let base = pinhole_ray(cam, (px.0 as f64 + 0.5, px.1 as f64 + 0.5)).unwrap();
        for (i, (rt, rb)) in tape.rays.iter().zip(&rbs).enumerate() {
            let focus_point = base.origin + base.dir * cam.focus_distance;
            let v = focus_point - rt.ray.origin;
            let proj = base.dir - rt.ray.dir * rt.ray.dir.dot(&base.dir);
            let contrib = rb.d_dir.dot(&proj) / v.norm();
            let fd_ray = fd_oracle(
                |zf| {
                    let mut c = cam.clone();
                    c.focus_distance = zf;
                    let sample = sample_aperture_disk(&c, seed, i, n);
                    let ray = lens_ray(&c, &base, &sample).unwrap();
                    let col = render_ray(&f, None, &ray, &cfg, (i, n), jitter, None)
                        .unwrap()
                        .rgb;
                    g.dot(&col) / n as f64
                },
                cam.focus_distance,
                h,
            );
            let d = (contrib - fd_ray).abs();
            if d > 1e-4 {
                println!(
                    "  ray {i}: analytic {contrib:+.6e} fd {fd_ray:+.6e} diff {d:.2e} samples {}",
                    rt.tape.samples.len()
                );
                for hh in [h, h / 4.0, h / 16.0, h / 64.0, h / 256.0] {
                    let fd_h = fd_oracle(
                        |zf| {
                            let mut c = cam.clone();
                            c.focus_distance = zf;
                            let sample = sample_aperture_disk(&c, seed, i, n);
                            let ray = lens_ray(&c, &base, &sample).unwrap();
                            let col = render_ray(&f, None, &ray, &cfg, (i, n), jitter, None)
                                .unwrap()
                                .rgb;
                            g.dot(&col) / n as f64
                        },
                        cam.focus_distance,
                        hh,
                    );
                    println!("    h={hh:.2e}: fd {fd_h:+.6e}");
                }
            }
        }
    }
}
