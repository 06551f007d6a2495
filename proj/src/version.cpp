#include "darcot/version.hpp"

namespace darcot {

const char* version() { return "0.1.0"; }

}  // namespace darcot
