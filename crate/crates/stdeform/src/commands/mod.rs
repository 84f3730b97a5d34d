//! One module per subcommand. Each exposes an argument struct, a report type
//! implementing [`crate::output::Report`] and a `run` function.

pub mod demo;
pub mod equiv;
pub mod gradcheck;
pub mod scaling;
pub mod uniform;
