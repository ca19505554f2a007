//! Convolution correctness oracle: the production direct convolution is
//! compared against an independently written brute-force reference that
//! materializes the zero-padded input and sums over every kernel position.

use sandglass_core::{conv2d, same_padding, Rng, Shape, Tensor};

/// Brute-force grouped cross-correlation with "same" padding, written as
/// pad-then-slide (the production kernel instead skips out-of-bounds taps).
fn reference_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, groups: usize) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let k = ws.h;
    let (pad_top, _pad_bottom) = same_padding(xs.h, k, stride);
    let (pad_left, _pad_right) = same_padding(xs.w, k, stride);
    let oh = xs.h.div_ceil(stride);
    let ow = xs.w.div_ceil(stride);
    let ph = xs.h + same_padding(xs.h, k, stride).0 + same_padding(xs.h, k, stride).1;
    let pw = xs.w + same_padding(xs.w, k, stride).0 + same_padding(xs.w, k, stride).1;

    // explicit padded copy
    let mut padded = vec![0.0f64; xs.n * xs.c * ph * pw];
    for b in 0..xs.n {
        for c in 0..xs.c {
            for y in 0..xs.h {
                for xx in 0..xs.w {
                    let py = y + pad_top;
                    let px = xx + pad_left;
                    padded[((b * xs.c + c) * ph + py) * pw + px] = x.get(b, c, y, xx);
                }
            }
        }
    }

    let cin_per_group = xs.c / groups;
    let cout_per_group = ws.n / groups;
    let mut out = Tensor::<f64>::zeros(Shape::new(xs.n, ws.n, oh, ow)).unwrap();
    for b in 0..xs.n {
        for oc in 0..ws.n {
            let g = oc / cout_per_group;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin_per_group {
                        let c = g * cin_per_group + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let py = oy * stride + ky;
                                let px = ox * stride + kx;
                                acc += padded[((b * xs.c + c) * ph + py) * pw + px]
                                    * w.get(oc, ci, ky, kx);
                            }
                        }
                    }
                    out.set(b, oc, oy, ox, acc);
                }
            }
        }
    }
    out
}

fn randint(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + (rng.next_u64() as usize) % (hi - lo + 1)
}

#[test]
fn production_conv_matches_brute_force_on_200_random_instances() {
    let mut rng = Rng::new(0xC0FFEE);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let k = [1, 3, 5][randint(&mut rng, 0, 2)];
        let stride = randint(&mut rng, 1, 2);
        let n = randint(&mut rng, 1, 2);
        // groups: standard, depthwise, or a nontrivial grouping
        let (groups, cin, cout) = match randint(&mut rng, 0, 2) {
            0 => {
                let cin = randint(&mut rng, 1, 8);
                (1, cin, randint(&mut rng, 1, 8))
            }
            1 => {
                let c = randint(&mut rng, 1, 8);
                (c, c, c)
            }
            _ => {
                let g = randint(&mut rng, 1, 4);
                (g, g * randint(&mut rng, 1, 2), g * randint(&mut rng, 1, 2))
            }
        };
        let h = randint(&mut rng, 1, 8);
        let w = randint(&mut rng, 1, 8);

        let x = Tensor::<f64>::random_normal(Shape::new(n, cin, h, w), &mut rng, 0.0, 1.0)
            .unwrap();
        let wt = Tensor::<f64>::random_normal(
            Shape::new(cout, cin / groups, k, k),
            &mut rng,
            0.0,
            1.0,
        )
        .unwrap();

        let got = conv2d(&x, &wt, stride, groups).unwrap_or_else(|e| {
            panic!("case {case} (k={k} s={stride} g={groups} cin={cin} cout={cout} {h}x{w}): {e}")
        });
        let want = reference_conv(&x, &wt, stride, groups);
        assert_eq!(got.shape(), want.shape(), "case {case} shape");
        for (a, b) in got.data().iter().zip(want.data()) {
            let d = (a - b).abs();
            worst = worst.max(d);
            assert!(
                d <= 1e-12,
                "case {case} (k={k} s={stride} g={groups} cin={cin} cout={cout} {h}x{w}): \
                 |{a} - {b}| = {d} > 1e-12"
            );
        }
    }
    // keep a record of how tight the agreement actually is
    assert!(worst <= 1e-12, "worst deviation {worst}");
}

#[test]
fn brute_force_agrees_on_stride2_even_input_padding() {
    // even input + stride 2 exercises the asymmetric-padding path
    let mut rng = Rng::new(7);
    for (h, w) in [(4, 4), (6, 4), (5, 8), (8, 8)] {
        let x = Tensor::<f64>::random_normal(Shape::new(1, 3, h, w), &mut rng, 0.0, 1.0)
            .unwrap();
        let wt =
            Tensor::<f64>::random_normal(Shape::new(4, 3, 3, 3), &mut rng, 0.0, 1.0).unwrap();
        let got = conv2d(&x, &wt, 2, 1).unwrap();
        let want = reference_conv(&x, &wt, 2, 1);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
