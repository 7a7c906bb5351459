pub(crate) use crate::autodiff::{gelu_scalar as gelu, softplus_scalar as softplus};
