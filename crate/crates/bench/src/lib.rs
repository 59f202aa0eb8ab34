pub use sfdit_core as core;
