from .gradcheck import GradCheckReport, grad_check
from .nn import (
    GRUParams,
    attention,
    cosine_matrix,
    cosine_similarity,
    gru_sequence,
    gru_step,
    layer_norm,
    linear,
    log_softmax_rows,
    normalize_rows,
    sgd_update,
    softmax_rows,
)
from .tensor import (
    Tensor,
    add,
    as_tensor,
    clip,
    concat,
    div,
    embedding,
    exp,
    getitem,
    leaky_relu,
    log,
    matmul,
    max_,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    stack,
    sub,
    sum_,
    swap_last,
    tanh,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
