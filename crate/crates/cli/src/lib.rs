//! Problem-file loading and report rendering shared between the binary and
//! its integration tests.

pub mod problem_file;
pub mod report;
