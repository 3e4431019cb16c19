//! Holds no code. The acceptance criteria live in `tests/acceptance`, in a
//! package of their own so that `cargo test --workspace` runs them after
//! every other crate's tests.
