import os


def apply_thread_cap() -> None:
    """Translate TRUMPET_THREADS into XLA CPU flags; must run before jax import."""
    n = os.environ.get("TRUMPET_THREADS")
    if not n:
        return
    n = max(1, int(n))
    flags = os.environ.get("XLA_FLAGS", "")
    if "intra_op_parallelism_threads" not in flags:
        extra = f"--xla_cpu_multi_thread_eigen={'true' if n > 1 else 'false'} intra_op_parallelism_threads={n}"
        os.environ["XLA_FLAGS"] = (flags + " " + extra).strip()
