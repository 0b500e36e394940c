# Tests package for profile cokriging
