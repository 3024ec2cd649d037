#pragma once

namespace fedsim {

// Bump on any change that can alter emitted numbers; result files carry this
// so archived runs stay attributable to the code that produced them.
inline constexpr const char* kVersion = "fedsim 0.1.0";

}  // namespace fedsim
