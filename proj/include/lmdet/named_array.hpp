#ifndef LMDET_NAMED_ARRAY_HPP
#define LMDET_NAMED_ARRAY_HPP

#include <string>
#include <vector>

namespace lmdet {

// checkpoint payload unit: name -> shape -> row-major float32 values
struct NamedArray {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

}  // namespace lmdet

#endif
