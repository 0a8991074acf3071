#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
mod autodiff {}
#[doc = include_str!("../../../book/src/attention.md")]
mod attention {}
#[doc = include_str!("../../../book/src/model.md")]
mod model {}
#[doc = include_str!("../../../book/src/training.md")]
mod training {}
#[doc = include_str!("../../../book/src/data.md")]
mod data {}
#[doc = include_str!("../../../book/src/metrics.md")]
mod metrics {}
#[doc = include_str!("../../../book/src/cli.md")]
mod cli {}
