from .optim import (
    SGD,
    Adam,
    EmaParamSet,
    Optimizer,
    ParamSet,
    ema_update,
    load_arrays,
    load_checkpoint,
    make_optimizer,
    opt_step,
    save_arrays,
    save_checkpoint,
)
from .tensor import (
    NumericError,
    ShapeError,
    TapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    forward_graph,
    matmul,
    mean,
    mse,
    mul,
    scale,
    silu,
    square,
    squared_error,
    sub,
    sum_all,
    sum_rows,
    tanh,
    zeros_like,
)
