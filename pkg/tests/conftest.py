import os

# pin BLAS threading before numpy loads: fixed reduction order, faster small GEMMs
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
