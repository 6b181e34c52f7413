#include "coinseg/parallel.hpp"

#include <cstdlib>
#include <string>

#include <spdlog/spdlog.h>

namespace coinseg {

int worker_count_from_env() {
    const char* value = std::getenv("COINSEG_WORKERS");
    if (!value || !*value) return 1;
    try {
        const int n = std::stoi(value);
        if (n >= 1) return n;
    } catch (const std::exception&) {
    }
    spdlog::warn("ignoring invalid COINSEG_WORKERS='{}'", value);
    return 1;
}

}  // namespace coinseg
