//! Command-line entry points (placeholder while modules land).

pub fn run() -> i32 {
    0
}
