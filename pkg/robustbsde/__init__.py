# robustbsde - entropy-penalized robust utility maximization on jump-diffusion lattices
