#pragma once

namespace darcot {

const char* version();

}  // namespace darcot
