"""Operation counters for cost accounting and receptive-field assertions."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class OpCounter:
    spmm_rows: int = 0
    spmm_multiplies: int = 0
    gemm_multiplies: int = 0
    input_rows_read: int = 0
    history_rows_read: int = 0
    input_nodes_touched: set = field(default_factory=set)
    history_nodes_touched: dict = field(default_factory=dict)

    def record_spmm(self, rows, nnz, dim):
        self.spmm_rows += int(rows)
        self.spmm_multiplies += int(nnz) * int(dim)

    def record_gemm(self, m, k, n):
        self.gemm_multiplies += int(m) * int(k) * int(n)

    def record_input_rows(self, nodes):
        self.input_rows_read += len(nodes)
        self.input_nodes_touched.update(int(v) for v in nodes)

    def record_history_rows(self, layer, nodes):
        self.history_rows_read += len(nodes)
        self.history_nodes_touched.setdefault(int(layer), set()).update(
            int(v) for v in nodes)

    def merge(self, other):
        self.spmm_rows += other.spmm_rows
        self.spmm_multiplies += other.spmm_multiplies
        self.gemm_multiplies += other.gemm_multiplies
        self.input_rows_read += other.input_rows_read
        self.history_rows_read += other.history_rows_read
        self.input_nodes_touched |= other.input_nodes_touched
        for layer, nodes in other.history_nodes_touched.items():
            self.history_nodes_touched.setdefault(layer, set()).update(nodes)
