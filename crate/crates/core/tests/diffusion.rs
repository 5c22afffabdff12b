use lift3d_core::autograd::Array;
use lift3d_core::diffusion::{forward_diffuse, sampling_timesteps, NoiseSchedule};
use lift3d_core::seeding::{normal_array, substream};
use proptest::prelude::*;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::from_config(&Default::default()).unwrap()
}

#[test]
fn alpha_bar_decreases_from_one() {
    let s = schedule();
    assert_eq!(s.num_steps(), 1000);
    assert_eq!(s.alpha_bar(0), 1.0);
    assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
    for t in 1..=1000 {
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
    assert!(s.alpha_bar(1000) > 0.0 && s.alpha_bar(1000) < 1e-4);
}

#[test]
fn out_of_range_timestep_is_an_error() {
    let s = schedule();
    let z = Array::zeros(&[2]);
    assert!(forward_diffuse(&z, 1001, &z, &s).is_err());
    assert!(forward_diffuse(&z, 3, &Array::zeros(&[3]), &s).is_err());
}

proptest! {
    #[test]
    fn zero_timestep_is_identity(seed in any::<u64>(), scale in 0.0f64..1e3) {
        let s = schedule();
        let mut rng = substream(seed, "test", 0);
        let z = normal_array(&mut rng, &[2, 3]);
        let eps = normal_array(&mut rng, &[2, 3]).scaled(scale);
        let z0 = forward_diffuse(&z, 0, &eps, &s).unwrap();
        prop_assert_eq!(z0.data(), z.data());
    }

    #[test]
    fn noising_is_affine_in_eps(seed in any::<u64>(), t in 1usize..=1000) {
        let s = schedule();
        let mut rng = substream(seed, "test", 1);
        let z = normal_array(&mut rng, &[4]);
        let eps = normal_array(&mut rng, &[4]);
        let zt = forward_diffuse(&z, t, &eps, &s).unwrap();
        let ab = s.alpha_bar(t);
        for i in 0..4 {
            let want = ab.sqrt() * z.data()[i] + (1.0 - ab).sqrt() * eps.data()[i];
            prop_assert!((zt.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_timesteps_descend_within_range(steps in 1usize..2000) {
        let ts = sampling_timesteps(1000, steps);
        prop_assert_eq!(ts[0], 1000);
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(*ts.last().unwrap() >= 1);
        prop_assert_eq!(ts.len(), steps.min(1000));
    }
}
