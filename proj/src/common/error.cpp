#include "tseg/error.hpp"

namespace tseg {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Label: return "label";
    case ErrorKind::Annotation: return "annotation";
    case ErrorKind::Input: return "input";
    case ErrorKind::Geometry: return "geometry";
    case ErrorKind::Manifest: return "manifest";
    case ErrorKind::Config: return "config";
    case ErrorKind::Graph: return "graph";
    case ErrorKind::Training: return "training";
    case ErrorKind::Fit: return "fit";
    case ErrorKind::Undefined: return "undefined";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Busy: return "busy";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

}  // namespace tseg
