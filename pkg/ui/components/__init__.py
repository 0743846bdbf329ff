# UI components: curve rendering for run artifacts
