"""Services: program registry, cost ledger, tools, simulation, experiments and the gateway engine."""
