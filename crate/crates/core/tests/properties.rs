use proptest::prelude::*;
use rdnsr::degrade::{blur_decimate, gaussian_kernel, BLUR_SIGMA, BLUR_SIZE};
use rdnsr::ensemble::{self_ensemble, transform_roundtrip, DihedralTransform};
use rdnsr::image::Image;
use rdnsr::metrics::{psnr, ssim};
use rdnsr::tensor::kernels::{concat_channels, pixel_shuffle, pixel_unshuffle};
use rdnsr::upscale::BicubicUpscaler;
use rdnsr::{Shape, Tensor4};

fn tensor(shape: Shape, seed: u64) -> Tensor4 {
    // Cheap deterministic fill; proptest drives the shapes and seeds.
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    Tensor4::from_fn(shape, |_, _, _, _| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 40) as f32 / (1u64 << 24) as f32
    })
}

fn image(c: usize, h: usize, w: usize, seed: u64) -> Image {
    Image::from_tensor(&tensor(Shape::new(1, c, h, w), seed), 0).unwrap()
}

proptest! {
    #[test]
    fn shuffle_then_unshuffle_is_identity(n in 1usize..3, c in 1usize..3, h in 1usize..5, w in 1usize..5, r in 1usize..4, seed: u64) {
        let x = tensor(Shape::new(n, c * r * r, h, w), seed);
        let y = pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(y.shape(), Shape::new(n, c, h * r, w * r));
        prop_assert_eq!(pixel_unshuffle(&y, r).unwrap(), x);
    }

    #[test]
    fn concat_then_split_is_identity(n in 1usize..3, widths in prop::collection::vec(1usize..4, 1..4), h in 1usize..4, w in 1usize..4, seed: u64) {
        let parts: Vec<Tensor4> = widths.iter().enumerate().map(|(i, &c)| tensor(Shape::new(n, c, h, w), seed ^ i as u64)).collect();
        let joined = concat_channels(&parts.iter().collect::<Vec<_>>()).unwrap();
        let mut start = 0;
        for p in &parts {
            prop_assert_eq!(&joined.narrow_channels(start, p.shape().c).unwrap(), p);
            start += p.shape().c;
        }
        prop_assert_eq!(start, joined.shape().c);
    }

    #[test]
    fn dihedral_round_trips_are_exact(h in 1usize..7, w in 1usize..7, t in 0usize..8, seed: u64) {
        let img = image(3, h, w, seed);
        let t = DihedralTransform::from_index(t);
        prop_assert_eq!(transform_roundtrip(&img, t), img.clone());
        let twice = t.apply(&t.apply(&img));
        if t.flip || t.quarter_turns % 2 == 0 {
            prop_assert_eq!(twice, img);
        }
    }

    #[test]
    fn psnr_and_ssim_are_symmetric(h in 11usize..16, w in 11usize..16, seed: u64) {
        let a = image(1, h, w, seed);
        let b = image(1, h, w, seed.wrapping_add(1));
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn blur_commutes_with_shifts_by_the_stride(shift in 1usize..3, seed: u64) {
        // Away from the borders, shifting the input by 3 pixels shifts the
        // decimated output by one sample.
        let img = image(1, 30, 30, seed);
        let k = gaussian_kernel(BLUR_SIZE, BLUR_SIGMA);
        let base = blur_decimate(&img, &k, BLUR_SIZE, 3);
        let shifted = img.crop(3 * shift, 3 * shift, 30 - 3 * shift, 30 - 3 * shift).unwrap();
        let moved = blur_decimate(&shifted, &k, BLUR_SIZE, 3);
        for y in 1..moved.height() - 2 {
            for x in 1..moved.width() - 2 {
                prop_assert!((moved.get(0, y, x) - base.get(0, y + shift, x + shift)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ensemble_of_constant_input_is_constant(v in 0.0f32..1.0, h in 1usize..5, w in 1usize..5) {
        let lr = Image::filled(3, h, w, v);
        let out = self_ensemble(&BicubicUpscaler { scale: 2 }, &lr).unwrap();
        prop_assert!(out.data().iter().all(|o| (o - v).abs() < 1e-6));
    }
}
