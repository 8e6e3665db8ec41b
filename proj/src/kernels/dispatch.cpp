#include <cstdlib>
#include <string>

#include "histovit/error.hpp"
#include "histovit/kernels.hpp"

namespace histovit::kernels {

namespace {

const Ops& resolve() {
    if (const char* forced = std::getenv("HISTOVIT_KERNELS")) {
        const std::string want(forced);
        if (want == "scalar") return scalar();
        if (want == "avx2") {
            if (const Ops* ops = avx2()) return *ops;
            throw Error(ErrorCategory::config, "HISTOVIT_KERNELS=avx2 but host lacks avx2");
        }
        if (want == "neon") {
            if (const Ops* ops = neon()) return *ops;
            throw Error(ErrorCategory::config, "HISTOVIT_KERNELS=neon but host lacks neon");
        }
        throw Error(ErrorCategory::config, "unknown HISTOVIT_KERNELS value '" + want + "'");
    }
    if (const Ops* ops = avx2()) return *ops;
    if (const Ops* ops = neon()) return *ops;
    return scalar();
}

}  // namespace

const Ops& active() {
    static const Ops& ops = resolve();
    return ops;
}

std::vector<const Ops*> available() {
    std::vector<const Ops*> out{&scalar()};
    if (const Ops* ops = avx2()) out.push_back(ops);
    if (const Ops* ops = neon()) out.push_back(ops);
    return out;
}

}  // namespace histovit::kernels
