#include "specprune/error.hpp"

namespace specprune {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::NonSymmetric: return "NonSymmetric";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::IndefiniteBeyondTolerance: return "IndefiniteBeyondTolerance";
    case ErrorCode::Singular: return "Singular";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::DuplicateIndex: return "DuplicateIndex";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::Io: return "Io";
    case ErrorCode::CorruptManifest: return "CorruptManifest";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::ZeroMatrix: return "ZeroMatrix";
    case ErrorCode::NegativeLambda: return "NegativeLambda";
    case ErrorCode::ZeroRowNorm: return "ZeroRowNorm";
    case ErrorCode::AllZeroRows: return "AllZeroRows";
    case ErrorCode::ZeroOperatorNorm: return "ZeroOperatorNorm";
    case ErrorCode::UnsupportedLayer: return "UnsupportedLayer";
  }
  return "Unknown";
}

}  // namespace specprune
