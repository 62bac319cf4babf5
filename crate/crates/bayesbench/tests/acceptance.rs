// acceptance suite lands after the modules
