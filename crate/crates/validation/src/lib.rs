//! Release gate of the workspace; see `tests/acceptance.rs`.
