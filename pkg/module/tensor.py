"""
张量与计算图

- Tensor：不可变的稠密数组（激活统一为 n×c×h×w），可选梯度跟踪
- Graph：只追加的操作记录（tape），反向传播严格按记录顺序逆序执行
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from utils.errors import ShapeError

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# 每个线程各自的活动 Graph 栈
_local = threading.local()


class Tensor:
    """稠密张量：数据只读，仅能通过记录的操作产生新张量"""

    __slots__ = ("data", "requires_grad", "name", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if dtype is None and arr.dtype not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float64)
        self._init(arr, requires_grad, name)

    def _init(self, arr: np.ndarray, requires_grad: bool, name: Optional[str]):
        if arr.dtype not in SUPPORTED_DTYPES:
            raise ShapeError(f"不支持的 dtype {arr.dtype}，只允许 float32 / float64")
        if arr.ndim == 0:
            arr = arr.reshape(1, 1, 1, 1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"张量各维度必须 ≥ 1，实际形状 {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @classmethod
    def wrap(cls, arr: np.ndarray, requires_grad: bool = False, name: Optional[str] = None) -> "Tensor":
        """直接接管新分配的数组（不复制），供算子内部使用"""
        t = cls.__new__(cls)
        t._init(arr, requires_grad, name)
        return t

    # ---- 基本属性 ----
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """只读视图"""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() 只适用于单元素张量，实际形状 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, name=self.name, dtype=dtype)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    """一次操作的记录：输入、输出、反向函数（闭包里保存前向中间量）"""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn
    index: int
    graph: "Graph"


def active_graph() -> Optional["Graph"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Graph:
    """
    计算图记录器

    用法：
        with Graph(parameters=params) as g:
            loss = ...
        grads = g.backward(loss)

    只有在 Graph 上下文内、且输入里有 requires_grad 张量时才记录操作；
    上下文外的计算只产生数值（推理路径）。
    """

    def __init__(self, parameters: Optional[Mapping[str, Tensor]] = None):
        self.nodes: List[Node] = []
        self.parameters: Dict[str, Tensor] = {}
        self._owner: Optional[int] = None
        if parameters:
            for name, tensor in parameters.items():
                self.watch(name, tensor)

    def watch(self, name: str, tensor: Tensor):
        """登记一个命名叶子参数；即使损失没有用到它，反向时也返回零梯度"""
        if not tensor.requires_grad:
            raise ShapeError(f"参数 {name} 未开启 requires_grad")
        existing = self.parameters.get(name)
        if existing is not None and existing is not tensor:
            raise ShapeError(f"参数名重复：{name}")
        self.parameters[name] = tensor

    def __enter__(self) -> "Graph":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        self._owner = threading.get_ident()
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.stack.pop()
        return False

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn):
        if self._owner is not None and self._owner != threading.get_ident():
            raise RuntimeError("同一个 Graph 不能被多个线程同时记录")
        dtypes = {t.dtype for t in inputs}
        if len(dtypes) > 1:
            raise ShapeError(f"{op}: 同一计算图内 dtype 必须一致，实际 {sorted(str(d) for d in dtypes)}")
        for t in inputs:
            if t.is_leaf and t.requires_grad and t.name:
                self.watch(t.name, t)
        node = Node(op, tuple(inputs), output, backward_fn, len(self.nodes), self)
        self.nodes.append(node)
        output._node = node

    def __iter__(self) -> Iterator[Node]:
        return iter(self.nodes)

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> Dict[str, Tensor]:
        """
        反向传播

        :param loss: 标量张量（单元素），必须由本图记录产生
        :return: {参数名: 梯度张量}，登记过但未被用到的参数得到零梯度
        """
        if loss.size != 1:
            raise ShapeError(f"backward 需要标量损失，实际形状 {loss.shape}")
        if loss._node is None or loss._node.index >= len(self.nodes) or self.nodes[loss._node.index] is not loss._node:
            raise ShapeError("损失不是由当前 Graph 记录产生的")

        pending: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        leaf_grads: Dict[int, np.ndarray] = {}
        leaves: Dict[int, Tensor] = {}

        # 严格按记录顺序逆序遍历
        for node in reversed(self.nodes[: loss._node.index + 1]):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{node.op}: 梯度形状 {gi.shape} 与输入形状 {inp.shape} 不一致")
                key = id(inp)
                if inp.is_leaf:
                    leaves[key] = inp
                    target = leaf_grads
                else:
                    target = pending
                if key in target:
                    target[key] = target[key] + gi
                else:
                    target[key] = gi

        for key, tensor in leaves.items():
            tensor.grad = leaf_grads[key]

        result: Dict[str, Tensor] = {}
        for name, tensor in self.parameters.items():
            g = leaf_grads.get(id(tensor))
            if g is None:
                g = np.zeros(tensor.shape, dtype=tensor.dtype)
            result[name] = Tensor.wrap(np.array(g, dtype=tensor.dtype))
        return result


def backward(loss: Tensor) -> Dict[str, Tensor]:
    """对记录了 loss 的 Graph 执行反向传播"""
    node = loss._node
    if node is None:
        raise ShapeError("损失不是由任何 Graph 记录产生的（是否忘了 with Graph()?）")
    return node.graph.backward(loss)
