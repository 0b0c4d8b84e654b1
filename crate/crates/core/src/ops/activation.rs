use crate::scalar::Scalar;
use crate::volume::Volume4;

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu<T: Scalar>(x: &Volume4<T>, slope: T) -> Volume4<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

pub fn tanh_act<T: Scalar>(x: &Volume4<T>) -> Volume4<T> {
    x.map(T::tanh)
}
