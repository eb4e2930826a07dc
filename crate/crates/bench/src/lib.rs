pub use hisekt_core;
