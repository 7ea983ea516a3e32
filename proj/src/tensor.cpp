#include "ecgad/tensor.hpp"

#include "ecgad/error.hpp"

namespace ecgad {

std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size())
        fail(ErrorKind::Shape, "tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                                   shape_string(shape_));
}

void Tensor::reshape(Shape shape) {
    if (count(shape) != data_.size())
        fail(ErrorKind::Shape, "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    shape_ = std::move(shape);
}

}  // namespace ecgad
