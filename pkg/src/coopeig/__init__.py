"""Principal eigenvalues of cooperative elliptic systems and the associated switching diffusions."""
