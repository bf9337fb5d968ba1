pub(crate) mod bench;
pub(crate) mod evaluate;
pub(crate) mod fit;
pub(crate) mod generate;
pub(crate) mod predict;
pub(crate) mod simulate;
