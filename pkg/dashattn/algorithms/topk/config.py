"""Config for the top-k baseline."""
import dashattn

config = {
    "k": dashattn.config.attention.topk
}

algo_id = "topk"
is_sparse = True
