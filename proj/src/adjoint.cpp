#include "snl/adjoint.hpp"

namespace snl {

std::string_view op_name(OpKind op) {
    switch (op) {
    case OpKind::Matmul: return "matmul";
    case OpKind::MatmulNT: return "matmul_nt";
    case OpKind::Add: return "add";
    case OpKind::Hadamard: return "hadamard";
    case OpKind::Exp: return "exp";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::SoftmaxCols: return "softmax_cols";
    case OpKind::Transpose: return "transpose";
    }
    return "unknown";
}

std::size_t op_arity(OpKind op) {
    switch (op) {
    case OpKind::Matmul:
    case OpKind::MatmulNT:
    case OpKind::Add:
    case OpKind::Hadamard: return 2;
    default: return 1;
    }
}

namespace {

Array forward(OpKind op, const std::vector<Array>& in) {
    switch (op) {
    case OpKind::Matmul: return matmul(in[0], in[1]);
    case OpKind::MatmulNT: return matmul_nt(in[0], in[1]);
    case OpKind::Add: return add(in[0], in[1]);
    case OpKind::Hadamard: return hadamard(in[0], in[1]);
    case OpKind::Exp: return exp_elementwise(in[0]);
    case OpKind::SoftmaxRows: return softmax_rows(in[0]);
    case OpKind::SoftmaxCols: return softmax_cols(in[0]);
    case OpKind::Transpose: return transpose(in[0]);
    }
    throw std::logic_error("unhandled op");
}

} // namespace

Array apply_op(OpKind op, std::vector<Array> inputs, AdjointRecord* record) {
    if (inputs.size() != op_arity(op))
        throw DimensionError(std::string(op_name(op)) + ": expected " + std::to_string(op_arity(op)) +
                             " inputs, got " + std::to_string(inputs.size()));
    Array out = forward(op, inputs);
    if (record) *record = AdjointRecord{op, std::move(inputs)};
    return out;
}

Array replay(const AdjointRecord& record) { return forward(record.op, record.saved); }

std::vector<Array> backward(const AdjointRecord& record, const Array& g) {
    const auto& in = record.saved;
    switch (record.op) {
    case OpKind::Matmul: return {matmul_nt(g, in[1]), matmul_tn(in[0], g)};
    case OpKind::MatmulNT: return {matmul(g, in[1]), matmul_tn(g, in[0])};
    case OpKind::Add: return {g, g};
    case OpKind::Hadamard: return {hadamard(g, in[1]), hadamard(g, in[0])};
    case OpKind::Exp: return {hadamard(g, exp_elementwise(in[0]))};
    case OpKind::SoftmaxRows: return {softmax_rows_backward(softmax_rows(in[0]), g)};
    case OpKind::SoftmaxCols: return {softmax_cols_backward(softmax_cols(in[0]), g)};
    case OpKind::Transpose: return {transpose(g)};
    }
    throw std::logic_error("unhandled op");
}

} // namespace snl
