//! Scratch: how ring-vs-FD aperture gradient agreement scales with n.
use lensfield::field::FieldGrads;
use lensfield::grad::*;
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
    let adjoint = PixelAdjoint { d_color: g };
    for n in [256usize, 512, 1024, 2048] {
        let cfg = RenderConfig {
            rays_per_pixel: n,
            step_size: 2e-3,
            bounds,
            max_samples_per_ray: 4096,
            background: Rgb::zeros(),
            use_occupancy: false,
            min_transmittance: 1e-9,
            seed: 5,
            serial: true,
        };
        let mut worst: f64 = 0.0;
        let mut count = 0;
        for (ci, cam) in cams.iter().enumerate() {
            for px in [(6u32, 6u32), (12, 12), (12, 6), (18, 12), (9, 15)] {
                let pixel = render_pixel_color(&f, None, cam, px, &cfg).unwrap();
                let analytic =
                    aperture_gradient(&f, None, cam, px, &cfg, &pixel, &adjoint).unwrap();
                let h = 1e-4 * cam.aperture_radius;
                let fd = fd_oracle(
                    |ar| {
                        let mut c = cam.clone();
                        c.aperture_radius = ar;
                        g.dot(&render_pixel_color(&f, None, &c, px, &cfg).unwrap().rgb)
                    },
                    cam.aperture_radius,
                    h,
                );
                if fd.abs() > 1e-2 {
                    let re = rel_err(analytic, fd);
                    if re > worst {
                        worst = re;
                    }
                    count += 1;
                    if re > 0.05 {
                        println!("  n={n} cam{ci} px{px:?}: analytic {analytic:+.4e} fd {fd:+.4e} rel {re:.3e}");
                    }
                }
            }
        }
        println!("n={n}: {count} strong probes, worst rel err {worst:.3e}");
    }

    // Focus gradient, same scaling question.
    for n in [4usize] {
        let cfg = RenderConfig {
            rays_per_pixel: n,
            step_size: 2e-3,
            bounds,
            max_samples_per_ray: 4096,
            background: Rgb::zeros(),
            use_occupancy: false,
            min_transmittance: 1e-9,
            seed: 5,
            serial: true,
        };
        let mut worst: f64 = 0.0;
        for cam in cams.iter() {
            for px in [(6u32, 6u32), (12, 12), (12, 6), (18, 12), (9, 15)] {
                let (_, tape) = render_pixel(&f, None, cam, px, &cfg).unwrap();
                let mut grads = FieldGrads::zeros_like(&f);
                let rbs = backward_pixel(&f, &tape, &adjoint, &mut grads).unwrap();
                let analytic = focus_gradient(cam, &tape, &rbs);
                let h = 1e-5 * cam.focus_distance;
                let fd = fd_oracle(
                    |zf| {
                        let mut c = cam.clone();
                        c.focus_distance = zf;
                        g.dot(&render_pixel_color(&f, None, &c, px, &cfg).unwrap().rgb)
                    },
                    cam.focus_distance,
                    h,
                );
                if fd.abs() > 1e-3 {
                    let re = rel_err(analytic, fd);
                    if re > 1e-2 {
                        println!(
                            "  focus n={n} px{px:?}: analytic {analytic:+.5e} fd {fd:+.5e} rel {re:.3e}"
                        );
                    }
                    worst = worst.max(re);
                }
            }
        }
        println!("focus n={n}: worst rel err {worst:.3e}");
    }
}
