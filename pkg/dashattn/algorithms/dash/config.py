"""Config for entmax-routed attention."""

config = {
    # "bias", "prior" or "uniform"
    "form": "bias"
}

algo_id = "dash"
is_sparse = True
