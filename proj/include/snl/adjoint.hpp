#pragma once

#include "snl/tensor.hpp"

#include <string_view>
#include <vector>

namespace snl {

/// Differentiable primitives with a hand-derived backward formula.
enum class OpKind {
    Matmul,      ///< C = A·B;        dA = G·Bᵀ, dB = Aᵀ·G
    MatmulNT,    ///< C = A·Bᵀ;       dA = G·B,  dB = Gᵀ·A
    Add,         ///< C = A + B;      dA = dB = G
    Hadamard,    ///< C = A ⊙ B;      dA = G ⊙ B, dB = G ⊙ A
    Exp,         ///< C = exp(A);     dA = G ⊙ C
    SoftmaxRows, ///< C = σ_row(A);   dA_ij = C_ij (G_ij − Σ_l G_il C_il)
    SoftmaxCols, ///< column analogue of SoftmaxRows
    Transpose,   ///< C = Aᵀ;         dA = Gᵀ
};

std::string_view op_name(OpKind op);
std::size_t op_arity(OpKind op);

/// Everything needed to replay an op forward and to pull a gradient back
/// through it. `saved` holds the op inputs in argument order.
struct AdjointRecord {
    OpKind op;
    std::vector<Array> saved;
};

/// Applies `op` to `inputs`, returning the output and filling `record`.
Array apply_op(OpKind op, std::vector<Array> inputs, AdjointRecord* record = nullptr);

/// Recomputes the forward output from the saved inputs.
Array replay(const AdjointRecord& record);

/// Gradients with respect to each saved input, given dL/d(output).
std::vector<Array> backward(const AdjointRecord& record, const Array& grad_output);

} // namespace snl
