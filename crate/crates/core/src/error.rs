use crate::backbone::BackboneError;
use crate::bitcore::BitError;
use crate::cwr::CwrError;
use crate::fixedpoint::QuantError;

/// Any failure raised by this crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Bit(#[from] BitError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Cwr(#[from] CwrError),
}
