"""
Linear-time butterfly primitives
================================

Times the matrix-vector product, the inverse and the log-determinant of
a full butterfly layer (levels 1..log2 D) for D = 2^8 .. 2^16, single
threaded, and fits the log-log slope of median time against D. A slope
near 1 means the cost grows linearly; a dense layer would show 2.

The log-determinant does not touch the batch at all, so it is hundreds of
times cheaper than the matvec here and per-call overhead flattens its
slope well below 1 over this range.
"""

from bflow.bench import loglog_slope, run_bench

dims = [2**k for k in range(8, 17)]
rows = run_bench(["matvec", "inverse", "logdet"], dims, [64], reps=9)

print("op,dim,batch,median_ns,iqr_ns")
for r in rows:
    print(r.csv_row())

for op in ("matvec", "inverse", "logdet"):
    sel = [r for r in rows if r.op == op]
    print(f"{op:8s} slope {loglog_slope([r.dim for r in sel], [r.median_ns for r in sel]):.3f}")
