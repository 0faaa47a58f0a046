pub use tokattr_core;
