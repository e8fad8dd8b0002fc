//! Checks shared by the integration tests and the acceptance run. Each one
//! panics on failure and otherwise returns a one-line summary.
#![allow(dead_code)]

pub type Check = (&'static str, fn() -> String);

macro_rules! checks {
    ($($name:ident),* $(,)?) => {
        pub const CHECKS: &[$crate::suite::Check] = &[$((stringify!($name), $name as fn() -> String)),*];
    };
}

/// One `#[test]` per listed check of a suite module.
macro_rules! suite_tests {
    ($module:ident: $($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                println!("{}", $crate::suite::$module::$name());
            }
        )*
    };
}

pub mod baselines;
pub mod layer_grads;
pub mod loss_grads;
pub mod oracles;
pub mod pretext;
