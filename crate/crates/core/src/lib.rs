pub mod advantage;
pub mod checkpoint;
pub mod cmdp;
pub mod critic;
pub mod lagrange;
pub mod nnfa;
pub mod oracle;
pub mod tail;
pub mod trainer;
