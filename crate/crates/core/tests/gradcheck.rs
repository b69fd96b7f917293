mod common;
#[path = "cases/gradcheck.rs"]
mod cases;

macro_rules! suite {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                cases::$name()
            }
        )*
    };
}

suite!(
    conv2d_gradients,
    depthwise_conv_gradients,
    conv2d_reference_instance,
    batchnorm_gradients,
    activation_gradients,
    sigmoid_backward_at_zero_is_quarter,
    pooling_and_scaling_gradients,
    linear_gradients,
    grouped_conv1d_gradients,
    cross_entropy_gradients,
    se_end_to_end_gradients,
    eca_end_to_end_gradients,
    lca_end_to_end_gradients,
    resnet_full_graph_gradients,
    mobilenet_full_graph_gradients,
);
