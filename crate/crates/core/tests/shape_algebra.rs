use enfnet::ops::{self, ConvSpec, Padding};
use enfnet::{Shape, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_matches_formula(h in 1usize..24, w in 1usize..24, k in 1usize..6, s in 1usize..4, p in 0usize..3) {
        let spec = ConvSpec::new(k, s, Padding::Explicit([p, p]));
        match spec.conv_output(h, w) {
            Ok((oh, ow)) => {
                prop_assert_eq!(oh, (h + 2 * p - k) / s + 1);
                prop_assert_eq!(ow, (w + 2 * p - k) / s + 1);
                let x = Tensor::ones(Shape::new(1, 2, h, w));
                let wt = Tensor::ones(Shape::new(3, 2, k, k));
                let b = Tensor::zeros(Shape::new(1, 3, 1, 1));
                let y = ops::conv2d(&x, &wt, &b, &spec).unwrap();
                prop_assert_eq!(y.shape(), Shape::new(1, 3, oh, ow));
            }
            Err(_) => prop_assert!(h + 2 * p < k || w + 2 * p < k),
        }
    }

    #[test]
    fn same_padding_keeps_size(h in 1usize..20, half in 0usize..3) {
        let k = 2 * half + 1;
        prop_assert_eq!(ConvSpec::same(k, 1).conv_output(h, h).unwrap(), (h, h));
    }

    #[test]
    fn transposed_conv_inverts_strided_size(h in 1usize..16, s in 1usize..5, extra in 0usize..3) {
        let k = s + extra;
        let spec = ConvSpec::new(k, s, Padding::Valid);
        let (oh, _) = spec.transpose_output(h, h).unwrap();
        prop_assert_eq!(oh, (h - 1) * s + k);
        prop_assert_eq!(spec.conv_output(oh, oh).unwrap(), (h, h));
        let x = Tensor::ones(Shape::new(1, 2, h, h));
        let wt = Tensor::ones(Shape::new(2, 3, k, k));
        let b = Tensor::zeros(Shape::new(1, 3, 1, 1));
        prop_assert_eq!(ops::conv2d_transpose(&x, &wt, &b, &spec).unwrap().shape(), Shape::new(1, 3, oh, oh));
    }

    #[test]
    fn pool_and_resize_shapes(half in 1usize..12, c in 1usize..4, out in 1usize..30) {
        let n = 2 * half;
        let x = Tensor::ones(Shape::new(1, c, n, n));
        let (pooled, argmax) = ops::max_pool2d(&x, 2).unwrap();
        prop_assert_eq!(pooled.shape(), Shape::new(1, c, half, half));
        prop_assert_eq!(argmax.len(), pooled.numel());
        prop_assert_eq!(ops::avg_pool2d_same(&x, 3).unwrap().shape(), x.shape());
        prop_assert_eq!(ops::bilinear_resize(&x, out, out + 1).unwrap().shape(), Shape::new(1, c, out, out + 1));
    }

    #[test]
    fn odd_sizes_refuse_to_pool(half in 1usize..12) {
        let x = Tensor::ones(Shape::new(1, 1, 2 * half + 1, 2 * half));
        prop_assert!(ops::max_pool2d(&x, 2).is_err());
    }
}
