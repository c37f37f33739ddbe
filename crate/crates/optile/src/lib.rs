//! A tensor-kernel synthesizer: specs describe small tensor programs, a
//! rewrite system decomposes them into loops, data movements, and microkernel
//! applications, and a dynamic program over that system finds the cheapest
//! complete implementation under an affine cost model. Decisions are memoized
//! in a rectangle-compressed spatial database and complete implementations
//! lower to a single C translation unit with vector extensions.

pub mod cost;
pub mod db;
pub mod ir;
pub mod kernel;
pub mod layout;
pub mod memorylimits;
pub mod parse;
pub mod rewrites;
pub mod search;
pub mod spec;
pub mod target;
pub mod tensorspec;

pub mod codegen;

pub use ir::ImplNode;
pub use layout::Layout;
pub use memorylimits::{MemVec, MemoryLimits};
pub use spec::{PrimKind, Spec, SpecKind};
pub use target::{MemoryLevel, Target};
pub use tensorspec::{Dtype, TensorSpec};
